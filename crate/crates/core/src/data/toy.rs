//! Synthetic 3x32x32 image classes for desk-scale runs.
//!
//! Every image starts as flat grey (0.5) and receives two class cues:
//!
//! * a *block*: an 8x8 square brightened by `block_amplitude` in all channels, in one of ten
//!   grid cells. The cell shows the true class with probability `block_reliability`,
//!   otherwise a uniformly chosen different class. The block is several times larger than
//!   an 8/255 perturbation, so it is a robust but imperfect cue.
//! * a *texture*: `texture_amplitude * cos(2 pi (fx x + fy y) / 32)` over the whole image,
//!   with a class-specific frequency pair. It always shows the true class but is small
//!   enough for an 8/255 attack to swap it for another class's texture.
//!
//! Independent Gaussian pixel noise with standard deviation `noise` is added last and the
//! result is clipped to `[0, 1]`. Labels are exactly balanced (`size / k` per class, the
//! remainder going to the lowest classes) and shuffled.
//!
//! Frequencies are multiples of 4 cycles per image, so every texture sums to zero over any
//! grid-aligned 8x8 cell and distinct textures are orthogonal. With `noise = 0` a matched
//! filter against the textures therefore classifies every image correctly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;

const SIDE: usize = 32;
const CELL: usize = 8;
const FREQUENCIES: [(i32, i32); 10] = [
    (4, 0),
    (0, 4),
    (4, 4),
    (4, -4),
    (8, 0),
    (0, 8),
    (8, 8),
    (8, -8),
    (12, 0),
    (0, 12),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRecipe {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub block_amplitude: f64,
    pub block_reliability: f64,
    pub texture_amplitude: f64,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        ToyRecipe {
            num_classes: 10,
            train_size: 2000,
            test_size: 500,
            noise: 0.06,
            block_amplitude: 0.15,
            block_reliability: 0.93,
            texture_amplitude: 6.0 / 255.0,
        }
    }
}

impl ToyRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(2..=FREQUENCIES.len()).contains(&self.num_classes) {
            return Err(Error::config("toy.num_classes", "must be between 2 and 10"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(
                "toy.noise",
                "must be a non-negative finite number",
            ));
        }
        if !(0.0..=1.0).contains(&self.block_reliability) {
            return Err(Error::config("toy.block_reliability", "must lie in [0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.block_amplitude)
            || !(0.0..=0.5).contains(&self.texture_amplitude)
        {
            return Err(Error::config(
                "toy.block_amplitude",
                "amplitudes must lie in [0, 0.5]",
            ));
        }
        Ok(())
    }

    /// Unit-amplitude texture of class `c`, one `32x32` plane.
    pub fn texture(c: usize) -> Vec<f64> {
        let (fx, fy) = FREQUENCIES[c];
        let mut plane = Vec::with_capacity(SIDE * SIDE);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let phase = (fx * x as i32 + fy * y as i32) as f64 / SIDE as f64;
                plane.push((2.0 * std::f64::consts::PI * phase).cos());
            }
        }
        plane
    }
}

/// Generates `size` examples of `split`. Train and test draw from separate streams.
pub fn make_toy_dataset(
    recipe: &ToyRecipe,
    size: usize,
    master_seed: u64,
    split: Split,
) -> Result<Dataset> {
    recipe.validate()?;
    let k = recipe.num_classes;
    let mut rng = rng::stream(master_seed, rng::TOY_DATA, &[split.index()]);
    let mut labels: Vec<usize> = (0..size).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let textures: Vec<Vec<f64>> = (0..k).map(ToyRecipe::texture).collect();
    let noise =
        Normal::new(0.0, recipe.noise).map_err(|e| Error::config("toy.noise", e.to_string()))?;
    let plane = SIDE * SIDE;
    let mut images = Vec::with_capacity(size * 3 * plane);
    for &y in &labels {
        let shown = if rng.random_bool(recipe.block_reliability) {
            y
        } else {
            let other = rng.random_range(0..k - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        };
        let (cell_row, cell_col) = (shown / 4, shown % 4);
        for _channel in 0..3 {
            for py in 0..SIDE {
                for px in 0..SIDE {
                    let mut v = 0.5 + recipe.texture_amplitude * textures[y][py * SIDE + px];
                    if py / CELL == cell_row && px / CELL == cell_col {
                        v += recipe.block_amplitude;
                    }
                    if recipe.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Dataset::new(images, labels, k, (3, SIDE, SIDE))
}
