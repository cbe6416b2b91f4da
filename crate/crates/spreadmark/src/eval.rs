//! Bit accuracy, per-channel PSNR and the robustness evaluation grid.

use crate::attacks::{AttackSpec, ImageTensor};
use crate::error::{Error, Result};
use crate::models::Models;
use crate::spread_codec::{extend, propagate, translate, Message};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fraction of positions where the two messages agree.
pub fn bit_accuracy(a: &Message, b: &Message) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "messages differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let same = a
        .bits()
        .iter()
        .zip(b.bits())
        .filter(|(x, y)| x == y)
        .count();
    Ok(same as f64 / a.len() as f64)
}

/// PSNR in dB with MAX = 1.0. Identical inputs yield the infinity sentinel,
/// which serializes as the string "inf".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnrDb(pub f64);

impl Serialize for PsnrDb {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for PsnrDb {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => Ok(PsnrDb(n.as_f64().unwrap_or(f64::NAN))),
            serde_json::Value::String(s) if s == "inf" => Ok(PsnrDb(f64::INFINITY)),
            other => Err(serde::de::Error::custom(format!("bad psnr value {other}"))),
        }
    }
}

/// PSNR of one channel of two same-shaped images.
pub fn psnr_channel(a: &ImageTensor, b: &ImageTensor, channel: usize) -> Result<PsnrDb> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::ShapeMismatch("psnr inputs differ in shape".into()));
    }
    let (h, w, _) = a.data.dim();
    let mut mse = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let d = a.data[(y, x, channel)] as f64 - b.data[(y, x, channel)] as f64;
            mse += d * d;
        }
    }
    mse /= (h * w) as f64;
    if mse == 0.0 {
        return Ok(PsnrDb(f64::INFINITY));
    }
    Ok(PsnrDb(10.0 * (1.0 / mse).log10()))
}

/// Per-channel PSNR triple (Y, Cb, Cr ordering for YCbCr tensors).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelPsnr {
    pub y: PsnrDb,
    pub cb: PsnrDb,
    pub cr: PsnrDb,
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<ChannelPsnr> {
    Ok(ChannelPsnr {
        y: psnr_channel(a, b, 0)?,
        cb: psnr_channel(a, b, 1)?,
        cr: psnr_channel(a, b, 2)?,
    })
}

/// One (image, attack) measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub attack: String,
    pub image: String,
    pub bit_accuracy: f64,
    pub message_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowSummary {
    pub attack: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Full evaluation output: summaries, transparency PSNR and per-image
/// records for re-analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<RowSummary>,
    pub psnr_mean: ChannelPsnr,
    pub config: serde_json::Value,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn row(&self, attack: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.attack == attack)
    }

    /// Plain-text table mirroring the attack-row naming.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .rows
            .iter()
            .map(|r| r.attack.len())
            .max()
            .unwrap_or(6)
            .max(6);
        out.push_str(&format!(
            "{:<w$}  {:>8}  {:>8}  {:>5}\n",
            "attack",
            "bit-acc",
            "std",
            "n",
            w = name_w
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<w$}  {:>8.3}  {:>8.3}  {:>5}\n",
                r.attack,
                r.mean,
                r.std,
                r.n,
                w = name_w
            ));
        }
        let fmt = |p: PsnrDb| {
            if p.0.is_finite() {
                format!("{:.2}", p.0)
            } else {
                "inf".to_string()
            }
        };
        out.push_str(&format!(
            "psnr (dB): Y {}  Cb {}  Cr {}\n",
            fmt(self.psnr_mean.y),
            fmt(self.psnr_mean.cb),
            fmt(self.psnr_mean.cr)
        ));
        out
    }
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    (mean, var.sqrt())
}

/// Run the robustness grid: for every attack row and every cover, embed a
/// fresh random message, attack the encoded image (the real codec for JPEG
/// rows), decode, translate and score bit accuracy. Covers must be YCbCr
/// tensors of the size the checkpoint was trained for.
pub fn evaluate_grid(
    models: &mut Models,
    attacks: &[AttackSpec],
    covers: &[(String, ImageTensor)],
    seed: u64,
) -> Result<EvalReport> {
    if covers.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let codec = models.codec;
    let (gh, gw) = models.decoder.grid;
    let mut records = Vec::new();
    let mut rows = Vec::new();

    // Transparency, measured once per cover with its own message stream.
    let mut psnr_y = Vec::new();
    let mut psnr_cb = Vec::new();
    let mut psnr_cr = Vec::new();
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        for (_, cover) in covers {
            let msg = Message::random(codec.l, &mut rng);
            let sm = propagate(&msg, &codec.with_seed(rng.random()), gh, gw)?;
            let encoded = models.encode_image(cover, &extend(&sm, codec.b)?)?;
            let p = psnr(cover, &encoded)?;
            psnr_y.push(p.y.0);
            psnr_cb.push(p.cb.0);
            psnr_cr.push(p.cr.0);
        }
    }
    let finite_mean = |vs: &[f64]| {
        if vs.iter().any(|v| !v.is_finite()) {
            PsnrDb(f64::INFINITY)
        } else {
            PsnrDb(vs.iter().sum::<f64>() / vs.len() as f64)
        }
    };
    let psnr_mean = ChannelPsnr {
        y: finite_mean(&psnr_y),
        cb: finite_mean(&psnr_cb),
        cr: finite_mean(&psnr_cr),
    };

    for (row_idx, attack) in attacks.iter().enumerate() {
        attack.validate()?;
        let mut accs = Vec::with_capacity(covers.len());
        for (img_idx, (name, cover)) in covers.iter().enumerate() {
            let mut rng =
                ChaCha12Rng::seed_from_u64(seed ^ ((row_idx as u64) << 32) ^ img_idx as u64);
            let message_seed: u64 = rng.random();
            let msg = Message::random(codec.l, &mut rng);
            let sm = propagate(&msg, &codec.with_seed(message_seed), gh, gw)?;
            let encoded = models.encode_image(cover, &extend(&sm, codec.b)?)?;
            let (attacked, _region) =
                crate::attacks::apply_attack(attack, &encoded, cover, codec.b, &mut rng)?;
            match models
                .decode_image(&attacked)
                .and_then(|grid| translate(&grid, &codec))
                .and_then(|got| bit_accuracy(&msg, &got))
            {
                Ok(acc) => {
                    accs.push(acc);
                    records.push(EvalRecord {
                        attack: attack.to_string(),
                        image: name.clone(),
                        bit_accuracy: acc,
                        message_seed,
                    });
                }
                Err(e) => {
                    // Per-image failures are recorded, not fatal.
                    records.push(EvalRecord {
                        attack: attack.to_string(),
                        image: format!("{name} [error: {e}]"),
                        bit_accuracy: f64::NAN,
                        message_seed,
                    });
                }
            }
        }
        let (mean, std) = mean_std(&accs);
        rows.push(RowSummary {
            attack: attack.to_string(),
            mean,
            std,
            n: accs.len(),
        });
    }

    Ok(EvalReport {
        rows,
        psnr_mean,
        config: serde_json::json!({
            "codec": codec,
            "grid": [gh, gw],
            "seed": seed,
            "images": covers.len(),
        }),
        records,
    })
}

/// The Table-2 style attack rows used by default evaluation runs.
pub fn default_attack_rows() -> Vec<AttackSpec> {
    use crate::attacks::ResizeMode;
    vec![
        AttackSpec::Identity,
        AttackSpec::Crop { p: 0.3 },
        AttackSpec::Cropout { p: 0.3 },
        AttackSpec::Dropout { p: 0.5 },
        AttackSpec::Rotate { alpha: 5.0 },
        AttackSpec::Gaussian { width: 2 },
        AttackSpec::Gaussian { width: 4 },
        AttackSpec::Subsample420,
        AttackSpec::Resize {
            s: 0.5,
            mode: ResizeMode::Nearest,
        },
        AttackSpec::Resize {
            s: 0.5,
            mode: ResizeMode::Lanczos,
        },
        AttackSpec::JpegReal { q: 50 },
    ]
}

/// The attack rows of the group-transfer experiment.
pub fn group_attack_rows() -> Vec<AttackSpec> {
    use crate::attacks::ResizeMode;
    vec![
        AttackSpec::Identity,
        AttackSpec::Crop { p: 0.3 },
        AttackSpec::Cropout { p: 0.3 },
        AttackSpec::Dropout { p: 0.5 },
        AttackSpec::Rotate { alpha: 5.0 },
        AttackSpec::Gaussian { width: 5 },
        AttackSpec::Subsample420,
        AttackSpec::Resize {
            s: 0.5,
            mode: ResizeMode::Lanczos,
        },
        AttackSpec::JpegReal { q: 95 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn msg(bits: &[u8]) -> Message {
        Message::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn bit_accuracy_examples() {
        let a = msg(&[0, 1, 1, 0]);
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 1.0);
        let b = msg(&[1, 0, 0, 1]);
        assert_eq!(bit_accuracy(&a, &b).unwrap(), 0.0);
        assert!(bit_accuracy(&a, &msg(&[0, 1])).is_err());
    }

    #[test]
    fn random_pairs_agree_at_chance_level() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let trials = 10_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let a = Message::random(32, &mut rng);
            let b = Message::random(32, &mut rng);
            acc += bit_accuracy(&a, &b).unwrap();
        }
        acc /= trials as f64;
        assert!((acc - 0.5).abs() < 0.03, "{acc}");
    }

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::new(Array3::from_elem((8, 8, 3), 0.5), crate::attacks::ColorSpace::YCbCr).unwrap();
        let p = psnr(&a, &a).unwrap();
        assert!(p.y.0.is_infinite());

        let mut b = a.clone();
        b.data.mapv_inplace(|v| v + 1.0 / 255.0);
        let p = psnr_channel(&a, &b, 0).unwrap();
        assert!((p.0 - 48.13) < 0.01 && (p.0 - 48.13) > -0.01, "{}", p.0);
    }

    #[test]
    fn psnr_serializes_infinity_sentinel() {
        let j = serde_json::to_string(&PsnrDb(f64::INFINITY)).unwrap();
        assert_eq!(j, "\"inf\"");
        let back: PsnrDb = serde_json::from_str(&j).unwrap();
        assert!(back.0.is_infinite());
        let j = serde_json::to_string(&PsnrDb(42.5)).unwrap();
        let back: PsnrDb = serde_json::from_str(&j).unwrap();
        assert_eq!(back.0, 42.5);
    }
}
