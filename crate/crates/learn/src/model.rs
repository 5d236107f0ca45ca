//! Small encoder/decoder corrector with skip concatenations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which objective the network is trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Complex images in, complex images out: `[Re s_1..s_N, Im s_1..s_N]`.
    Img,
    /// `N` magnitude images in, `(Ŝ0, R̂2*)` out.
    Bio,
}

impl Arch {
    pub fn tag(self) -> u8 {
        match self {
            Arch::Img => 1,
            Arch::Bio => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Arch::Img),
            2 => Some(Arch::Bio),
            _ => None,
        }
    }

    pub fn channels(self, n_echoes: usize) -> (usize, usize) {
        match self {
            Arch::Img => (2 * n_echoes, 2 * n_echoes),
            Arch::Bio => (n_echoes, 2),
        }
    }
}

/// One step of the layer program. `Save` pushes the current activation on a
/// skip stack and `Concat` pops it back, appending its channels after the
/// current ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv { cin: usize, cout: usize, k: usize },
    Relu,
    Down,
    Up,
    Save,
    Concat,
}

/// Default unit of the R2* channel in s⁻¹. The network emits
/// `softplus(z)` and the physical rate is that value times the unit, which
/// keeps the raw activations of order one for brain-like rates.
pub const DEFAULT_R2_UNIT: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorModel {
    pub arch: Arch,
    pub layers: Vec<Layer>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: Vec<f64>,
    pub seed: u64,
    /// Img only: add the input to the network output.
    pub residual: bool,
    /// Bio only: s⁻¹ per unit of the R2* channel.
    pub r2_unit: f64,
}

/// Depth-2 U-Net layer program with widths `w1`, `w2`.
pub fn unet_layers(cin: usize, cout: usize, w1: usize, w2: usize) -> Vec<Layer> {
    use Layer::*;
    vec![
        Conv { cin, cout: w1, k: 3 },
        Relu,
        Conv { cin: w1, cout: w1, k: 3 },
        Relu,
        Save,
        Down,
        Conv { cin: w1, cout: w2, k: 3 },
        Relu,
        Conv { cin: w2, cout: w2, k: 3 },
        Relu,
        Save,
        Down,
        Conv { cin: w2, cout: w2, k: 3 },
        Relu,
        Up,
        Concat,
        Conv { cin: 2 * w2, cout: w2, k: 3 },
        Relu,
        Up,
        Concat,
        Conv { cin: w2 + w1, cout: w1, k: 3 },
        Relu,
        Conv { cin: w1, cout, k: 1 },
    ]
}

/// Checks the channel flow of a layer program and returns its depth (number
/// of `Down` steps).
pub fn check_layers(layers: &[Layer], cin: usize, cout: usize) -> Result<usize> {
    let mut c = cin;
    let mut stack = Vec::new();
    let (mut level, mut depth) = (0usize, 0usize);
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            Layer::Conv { cin, cout, k } => {
                if cin != c {
                    return Err(Error::InvalidArgument(format!("layer {i}: conv expects {cin} channels, gets {c}")));
                }
                if k % 2 == 0 || cout == 0 {
                    return Err(Error::InvalidArgument(format!("layer {i}: conv needs odd k and cout > 0")));
                }
                c = cout;
            }
            Layer::Relu => {}
            Layer::Down => {
                level += 1;
                depth = depth.max(level);
            }
            Layer::Up => {
                level = level
                    .checked_sub(1)
                    .ok_or_else(|| Error::InvalidArgument(format!("layer {i}: upsampling above input resolution")))?;
            }
            Layer::Save => stack.push((c, level)),
            Layer::Concat => {
                let (sc, sl) =
                    stack.pop().ok_or_else(|| Error::InvalidArgument(format!("layer {i}: concat without save")))?;
                if sl != level {
                    return Err(Error::InvalidArgument(format!("layer {i}: skip resolution mismatch")));
                }
                c += sc;
            }
        }
    }
    if !stack.is_empty() || level != 0 {
        return Err(Error::InvalidArgument("layer program leaves unmatched skips or resolution".into()));
    }
    if c != cout {
        return Err(Error::InvalidArgument(format!("layer program ends with {c} channels, expected {cout}")));
    }
    Ok(depth)
}

fn param_count(layers: &[Layer]) -> usize {
    layers
        .iter()
        .map(|l| match *l {
            Layer::Conv { cin, cout, k } => cout * cin * k * k + cout,
            _ => 0,
        })
        .sum()
}

impl CorrectorModel {
    /// Default desk-scale U-Net (widths 16/32) for `n_echoes` echoes.
    pub fn unet(arch: Arch, n_echoes: usize, seed: u64) -> Result<Self> {
        let (cin, cout) = arch.channels(n_echoes);
        Self::with_layers(arch, n_echoes, unet_layers(cin, cout, 16, 32), seed)
    }

    /// He-uniform weights drawn from `seed`, zero biases. The last
    /// convolution of a residual img model starts at zero so the untrained
    /// network is the identity.
    pub fn with_layers(arch: Arch, n_echoes: usize, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let (cin, cout) = arch.channels(n_echoes);
        check_layers(&layers, cin, cout)?;
        let residual = arch == Arch::Img;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&layers));
        let last_conv = layers.iter().rposition(|l| matches!(l, Layer::Conv { .. }));
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Conv { cin, cout, k } = *layer {
                let fan_in = (cin * k * k) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let zero = residual && Some(i) == last_conv;
                for _ in 0..cout * cin * k * k {
                    params.push(if zero { 0.0 } else { rng.random_range(-bound..bound) });
                }
                params.extend(std::iter::repeat_n(0.0, cout));
            }
        }
        Ok(Self { arch, layers, in_channels: cin, out_channels: cout, params, seed, residual, r2_unit: DEFAULT_R2_UNIT })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_echoes(&self) -> usize {
        match self.arch {
            Arch::Img => self.in_channels / 2,
            Arch::Bio => self.in_channels,
        }
    }

    pub fn depth(&self) -> usize {
        check_layers(&self.layers, self.in_channels, self.out_channels).unwrap_or(0)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::InvalidShape(format!(
                "model expects [{}, h, w] input, got {shape:?}",
                self.in_channels
            )));
        }
        let m = 1 << self.depth();
        if !shape[1].is_multiple_of(m) || !shape[2].is_multiple_of(m) || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::InvalidShape(format!(
                "spatial dims {}x{} must be nonzero multiples of {m}",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `x` on `tape`. Returns the output node and
    /// the parameter leaves in flat-vector order.
    pub fn forward_on(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(x).shape())?;
        let mut leaves = Vec::new();
        let mut offset = 0;
        let mut h = x;
        let mut stack = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { cin, cout, k } => {
                    let nw = cout * cin * k * k;
                    let w = tape.leaf(Tensor::new(vec![cout, cin, k, k], self.params[offset..offset + nw].to_vec()));
                    let b = tape.leaf(Tensor::new(vec![cout], self.params[offset + nw..offset + nw + cout].to_vec()));
                    offset += nw + cout;
                    leaves.push(w);
                    leaves.push(b);
                    tape.conv2d(h, w, b)
                }
                Layer::Relu => tape.relu(h),
                Layer::Down => tape.avg_pool2(h),
                Layer::Up => tape.upsample2(h),
                Layer::Save => {
                    stack.push(h);
                    h
                }
                Layer::Concat => {
                    let skip = stack.pop().expect("validated layer program");
                    tape.concat(h, skip)
                }
            };
        }
        let out = match self.arch {
            Arch::Img if self.residual => tape.add(h, x),
            Arch::Img => h,
            Arch::Bio => {
                let s0 = tape.channels(h, 0, 1);
                let raw = tape.channels(h, 1, 2);
                let r2 = tape.softplus(raw);
                tape.concat(s0, r2)
            }
        };
        Ok((out, leaves))
    }

    /// Output for one channelized slice `[in_channels, h, w]`. In bio mode
    /// channel 1 is `R̂2*` in units of [`CorrectorModel::r2_unit`].
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let (out, _) = self.forward_on(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Flattens the gradients of `leaves` into parameter order.
pub fn gather_grads(tape: &Tape, grads: &[Option<Tensor>], leaves: &[Var]) -> Vec<f64> {
    let mut flat = Vec::new();
    for &v in leaves {
        match &grads[v.index()] {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
        }
    }
    flat
}
