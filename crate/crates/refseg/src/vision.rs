//! Small trainable CNN backbone producing a stride-4 feature map, plus the
//! normalized-coordinate channel variant.
//!
//! Four 3x3 conv+relu blocks with channels 8 -> 16 -> 32 -> C and strides
//! 1, 2, 1, 2. A 3x3 stride-2 convolution cannot halve an even extent with
//! symmetric integral padding, so each strided block pads one extra row and
//! column on the top-left first and convolves unpadded.

use crate::error::{Error, Result};
use crate::imgio::Raster;
use crate::optim::{he_limit, uniform_init, ParamId, ParamStore, TapeBindings};
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Total downsampling factor of the backbone.
pub const STRIDE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
pub struct VisParams {
    blocks: Vec<ConvBlock>,
    pub out_channels: usize,
}

pub struct VisVars {
    blocks: Vec<(Var, Var, usize)>,
}

pub fn init_vis<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    out_channels: usize,
    rng: &mut R,
) -> VisParams {
    let plan = [(3, 8, 1), (8, 16, 2), (16, 32, 1), (32, out_channels, 2)];
    let mut blocks = Vec::new();
    for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
        let limit = he_limit(cin * 9);
        let w = store.add(&format!("vis.conv{}.w", i + 1), uniform_init(rng, vec![cout, cin, 3, 3], limit));
        let b = store.add(&format!("vis.conv{}.b", i + 1), Tensor::zeros(vec![cout]));
        blocks.push(ConvBlock { w, b, stride });
    }
    VisParams { blocks, out_channels }
}

pub fn bind_vis<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    binds: &mut TapeBindings,
    p: &VisParams,
) -> VisVars {
    VisVars {
        blocks: p
            .blocks
            .iter()
            .map(|b| (store.bind(tape, b.w, binds), store.bind(tape, b.b, binds), b.stride))
            .collect(),
    }
}

/// Converts an 8-bit RGB raster into a `[3, H, W]` tensor in [0, 1].
pub fn image_tensor<T: Scalar>(img: &Raster) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(x, y);
            for c in 0..3 {
                data[(c * h + y) * w + x] = fl(px[c] as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Runs the backbone; image extents must be divisible by [`STRIDE`].
pub fn extract<T: Scalar>(tape: &mut Tape<T>, vars: &VisVars, image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[1] % STRIDE != 0 || s[2] % STRIDE != 0 {
        return Err(Error::InvalidConfig(format!(
            "image extents {s:?} must be divisible by {STRIDE}"
        )));
    }
    let mut x = image;
    for &(w, b, stride) in &vars.blocks {
        let pre = if stride == 2 {
            let padded = tape.pad2d(x, 1, 0, 1, 0);
            tape.conv2d(padded, w, 2, 0)?
        } else {
            tape.conv2d(x, w, 1, 1)?
        };
        let biased = tape.add_channel_bias(pre, b)?;
        x = tape.relu(biased);
    }
    Ok(x)
}

/// Appends normalized x and y coordinate channels in [-1, 1].
pub fn append_coords<T: Scalar>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    let (h, w) = (s[1], s[2]);
    let norm = |i: usize, extent: usize| -> f64 {
        if extent <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (extent - 1) as f64
        }
    };
    let mut data = vec![T::zero(); 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = fl(norm(x, w)); // channel 0: x coordinate
            data[h * w + y * w + x] = fl(norm(y, h)); // channel 1: y coordinate
        }
    }
    let coords = tape.constant(Tensor::new(vec![2, h, w], data));
    tape.concat_channels(&[features, coords])
}
