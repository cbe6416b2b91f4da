use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// A named parameter with its gradient and Adam moment buffers.
pub struct ParamTensor {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
    /// Trainable tensors receive gradients and optimizer updates; state
    /// tensors (batch-norm running statistics) are updated in forward passes.
    pub trainable: bool,
}

/// Flat store for the networks' parameters and persistent state.
#[derive(Default)]
pub struct ParamStore {
    items: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f32>, trainable: bool) -> ParamId {
        let shape = value.raw_dim();
        self.items.push(ParamTensor {
            name: name.to_string(),
            value,
            grad: ArrayD::zeros(shape.clone()),
            m: ArrayD::zeros(shape.clone()),
            v: ArrayD::zeros(shape),
            trainable,
        });
        ParamId(self.items.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.items[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.items[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.items.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.fill(0.0);
        }
    }

    /// Total L2 norm of all trainable gradients, for diagnostics.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in &self.items {
            if p.trainable {
                for &g in p.grad.iter() {
                    acc += (g as f64) * (g as f64);
                }
            }
        }
        acc.sqrt()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.items.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Convolution weight in (kh, kw, cin, cout) layout, matching the NHWC
/// activation layout used by the conv kernels.
pub fn conv_weight_shape(kh: usize, kw: usize, cin: usize, cout: usize) -> IxDyn {
    IxDyn(&[kh, kw, cin, cout])
}

/// Kaiming-uniform initialization with the fan-in bound used by common
/// deep-learning defaults: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_conv_weight(
    rng: &mut ChaCha12Rng,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> ArrayD<f32> {
    let fan_in = (kh * kw * cin) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let mut w = ArrayD::zeros(conv_weight_shape(kh, kw, cin, cout));
    for v in w.iter_mut() {
        *v = rng.random_range(-bound..bound) as f32;
    }
    w
}

pub fn init_bias(rng: &mut ChaCha12Rng, fan_in: usize, len: usize) -> ArrayD<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut b = ArrayD::zeros(IxDyn(&[len]));
    for v in b.iter_mut() {
        *v = rng.random_range(-bound..bound) as f32;
    }
    b
}

/// View a 1-D parameter as `Array1`.
pub fn as1(p: &ArrayD<f32>) -> Array1<f32> {
    p.to_shape(p.len()).unwrap().to_owned().into_dimensionality().unwrap()
}

/// View a conv parameter as `Array4` (kh, kw, cin, cout).
pub fn as4(p: &ArrayD<f32>) -> ndarray::ArrayView4<'_, f32> {
    p.view().into_dimensionality().unwrap()
}

/// Mutable `Array4` view of a conv parameter's gradient.
pub fn as4_mut(p: &mut ArrayD<f32>) -> ndarray::ArrayViewMut4<'_, f32> {
    p.view_mut().into_dimensionality().unwrap()
}

pub fn zeros4(n: usize, h: usize, w: usize, c: usize) -> Array4<f32> {
    Array4::zeros((n, h, w, c))
}
