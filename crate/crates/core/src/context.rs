//! Adjacent-slice triplets and the context block forward pass.
//!
//! For slice `z` of a stack the block produces three channels:
//!
//! ```text
//! [ sigmoid(f(S(z-1)) * S(z) + S(z)),  S(z),  sigmoid(f(S(z+1)) * S(z) + S(z)) ]
//! ```
//!
//! where `f` is a 3x3 convolution with 10 filters followed by a 1x1
//! convolution down to one channel (no activation in between). Convolutions
//! are stride-1 cross-correlations with zero padding. Edge slices reuse
//! themselves as their missing neighbour.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GrayImage, VolumeStack};

pub const FEATURE_FILTERS: usize = 10;

/// Externally trained weights of the context block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWeights {
    /// `[filter][row][col]`
    pub conv3x3_kernels: [[[f32; 3]; 3]; FEATURE_FILTERS],
    pub conv3x3_bias: [f32; FEATURE_FILTERS],
    pub conv1x1_kernel: [f32; FEATURE_FILTERS],
    pub conv1x1_bias: f32,
}

impl ContextWeights {
    pub fn zeros() -> Self {
        ContextWeights {
            conv3x3_kernels: [[[0.0; 3]; 3]; FEATURE_FILTERS],
            conv3x3_bias: [0.0; FEATURE_FILTERS],
            conv1x1_kernel: [0.0; FEATURE_FILTERS],
            conv1x1_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .conv3x3_kernels
            .iter()
            .flatten()
            .flatten()
            .all(|v| v.is_finite())
            && self.conv3x3_bias.iter().all(|v| v.is_finite())
            && self.conv1x1_kernel.iter().all(|v| v.is_finite())
            && self.conv1x1_bias.is_finite();
        if !finite {
            return Err(Error::InvalidValue("context weights must be finite".into()));
        }
        Ok(())
    }

    /// Shape mismatches surface as schema errors.
    pub fn from_json(json: &str) -> Result<Self> {
        let w: ContextWeights = serde_json::from_str(json)
            .map_err(|e| Error::Schema(format!("context weights: {e}")))?;
        w.validate()?;
        Ok(w)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SliceTriplet<'a> {
    pub prev: &'a GrayImage,
    pub current: &'a GrayImage,
    pub next: &'a GrayImage,
}

/// Three-channel output of the context block.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTensor {
    pub prev: GrayImage,
    pub current: GrayImage,
    pub next: GrayImage,
}

pub fn slice_triplets(vol: &VolumeStack) -> Vec<SliceTriplet<'_>> {
    let last = vol.depth() - 1;
    (0..vol.depth())
        .map(|z| SliceTriplet {
            prev: vol.slice(z.saturating_sub(1)),
            current: vol.slice(z),
            next: vol.slice((z + 1).min(last)),
        })
        .collect()
}

pub fn views_2d(img: &GrayImage) -> SliceTriplet<'_> {
    SliceTriplet {
        prev: img,
        current: img,
        next: img,
    }
}

/// `conv1x1(conv3x3(slice))`, one value per pixel.
fn fused_features(slice: &GrayImage, w: &ContextWeights) -> Vec<f64> {
    let (h, wd) = slice.dims();
    let px = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= wd as i64 || y >= h as i64 {
            0.0
        } else {
            slice.get(x as usize, y as usize) as f64
        }
    };
    let mut out = Vec::with_capacity(h * wd);
    for y in 0..h as i64 {
        for x in 0..wd as i64 {
            let mut window = [0.0f64; 9];
            for (i, v) in window.iter_mut().enumerate() {
                *v = px(x + (i % 3) as i64 - 1, y + (i / 3) as i64 - 1);
            }
            let mut fused = w.conv1x1_bias as f64;
            for f in 0..FEATURE_FILTERS {
                let k = &w.conv3x3_kernels[f];
                let mut acc = w.conv3x3_bias[f] as f64;
                for (i, v) in window.iter().enumerate() {
                    acc += k[i / 3][i % 3] as f64 * v;
                }
                fused += w.conv1x1_kernel[f] as f64 * acc;
            }
            out.push(fused);
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn context_channel(neighbour: &GrayImage, current: &GrayImage, w: &ContextWeights) -> GrayImage {
    let features = fused_features(neighbour, w);
    let data = features
        .iter()
        .zip(current.data())
        .map(|(&f, &s)| {
            let s = s as f64;
            sigmoid(f * s + s) as f32
        })
        .collect();
    GrayImage::new(current.height(), current.width(), data).expect("context channel dimensions")
}

pub fn context_block_forward(
    triplet: SliceTriplet<'_>,
    weights: &ContextWeights,
) -> Result<ContextTensor> {
    weights.validate()?;
    let dims = triplet.current.dims();
    if triplet.prev.dims() != dims || triplet.next.dims() != dims {
        return Err(Error::DimensionMismatch(format!(
            "triplet slices {:?}, {:?}, {:?}",
            triplet.prev.dims(),
            dims,
            triplet.next.dims()
        )));
    }
    Ok(ContextTensor {
        prev: context_channel(triplet.prev, triplet.current, weights),
        current: triplet.current.clone(),
        next: context_channel(triplet.next, triplet.current, weights),
    })
}

/// Runs the block over every slice of a stack.
pub fn forward_volume(vol: &VolumeStack, weights: &ContextWeights) -> Result<Vec<ContextTensor>> {
    slice_triplets(vol)
        .into_par_iter()
        .map(|t| context_block_forward(t, weights))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(v: f32) -> GrayImage {
        GrayImage::filled(4, 5, v)
    }

    #[test]
    fn triplets_clamp_edges() {
        let vol = VolumeStack::new(vec![slice(0.0)]).unwrap();
        let t = slice_triplets(&vol);
        assert_eq!(t.len(), 1);
        assert!(std::ptr::eq(t[0].prev, t[0].current) && std::ptr::eq(t[0].next, t[0].current));

        let vol = VolumeStack::new(vec![slice(0.0), slice(1.0), slice(2.0)]).unwrap();
        let t = slice_triplets(&vol);
        assert_eq!(t.len(), 3);
        assert_eq!(
            (
                t[1].prev.get(0, 0),
                t[1].current.get(0, 0),
                t[1].next.get(0, 0)
            ),
            (0.0, 1.0, 2.0)
        );
        assert_eq!(t[0].prev.get(0, 0), 0.0);
        assert_eq!(t[2].next.get(0, 0), 2.0);
    }

    #[test]
    fn zero_weights_on_zero_input() {
        let img = slice(0.0);
        let out = context_block_forward(views_2d(&img), &ContextWeights::zeros()).unwrap();
        assert!(out.prev.data().iter().all(|&v| v == 0.5));
        assert!(out.next.data().iter().all(|&v| v == 0.5));
        assert!(out.current.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_sigmoid_of_slice() {
        let img = GrayImage::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let out = context_block_forward(views_2d(&img), &ContextWeights::zeros()).unwrap();
        for (i, &v) in img.data().iter().enumerate() {
            assert_eq!(out.prev.data()[i], sigmoid(v as f64) as f32);
        }
        assert_eq!(out.current, img);
    }

    #[test]
    fn convolution_is_zero_padded_cross_correlation() {
        // single filter picking the right-hand neighbour
        let mut w = ContextWeights::zeros();
        w.conv3x3_kernels[0][1][2] = 1.0;
        w.conv1x1_kernel[0] = 1.0;
        let img = GrayImage::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(fused_features(&img, &w), vec![2.0, 3.0, 0.0]);
    }

    #[test]
    fn dimension_and_weight_errors() {
        let a = slice(0.0);
        let b = GrayImage::zeros(3, 3);
        let t = SliceTriplet {
            prev: &b,
            current: &a,
            next: &a,
        };
        assert!(context_block_forward(t, &ContextWeights::zeros()).is_err());
        let mut w = ContextWeights::zeros();
        w.conv1x1_bias = f32::NAN;
        assert!(context_block_forward(views_2d(&a), &w).is_err());
    }

    #[test]
    fn weights_json_shapes() {
        let w = ContextWeights::zeros();
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(ContextWeights::from_json(&json).unwrap(), w);
        let short = json.replacen("[0.0,0.0,0.0]", "[0.0,0.0]", 1);
        assert!(matches!(
            ContextWeights::from_json(&short),
            Err(Error::Schema(_))
        ));
    }
}
