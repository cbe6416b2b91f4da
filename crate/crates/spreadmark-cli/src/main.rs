fn main() {
    println!("spreadmark");
}
