//! Synthetic image-caption pairs: each image draws a shape in a color at a
//! grid position; its caption is one token per attribute plus end-of-text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const MAX_VALUES: usize = 8;

const PALETTE: [[f64; 3]; MAX_VALUES] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: usize,
    pub color: usize,
    pub position: usize,
}

/// Which tuples a stream draws from, and from which random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Every tuple except the held-out ones.
    Train,
    /// Same tuples as `Train`, independent draws.
    Eval,
    /// Only the held-out tuples.
    Holdout,
    /// All tuples.
    All,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
            Split::Holdout => 3,
            Split::All => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub attrs: Attributes,
    /// `[3, S, S]`, channel-major.
    pub image: Vec<f64>,
    pub tokens: Vec<usize>,
}

/// Paired images `[N, 3, S, S]` and token rows `[N, context]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub tokens: Vec<usize>,
    pub attrs: Vec<Attributes>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub seed: u64,
    pub n_values: usize,
    pub image_size: usize,
    pub context: usize,
    pub noise: f64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SynthTask {
    pub fn new(seed: u64, n_values: usize, image_size: usize, context: usize, noise: f64) -> Result<Self> {
        if !(2..=MAX_VALUES).contains(&n_values) {
            return Err(Error::Config(format!("n_values must be in 2..={MAX_VALUES}, got {n_values}")));
        }
        if context < 4 {
            return Err(Error::Config(format!("context {context} cannot hold three attributes and EOT")));
        }
        let grid = Self::grid_for(n_values);
        if image_size < 4 * grid {
            return Err(Error::Config(format!("image_size {image_size} too small for a {grid}x{grid} grid")));
        }
        Ok(SynthTask {
            seed,
            n_values,
            image_size,
            context,
            noise,
        })
    }

    fn grid_for(n: usize) -> usize {
        (1..).find(|g| g * g >= n).unwrap_or(1)
    }

    pub fn vocab(&self) -> usize {
        3 * self.n_values + 2
    }

    pub fn eot(&self) -> usize {
        3 * self.n_values + 1
    }

    /// Caption tokens. Template 0 orders (shape, color, position); template 1
    /// orders (color, shape, position).
    pub fn caption_with(&self, a: Attributes, template: usize) -> Vec<usize> {
        let n = self.n_values;
        let (s, c, p) = (1 + a.shape, 1 + n + a.color, 1 + 2 * n + a.position);
        let head = if template % 2 == 0 { [s, c, p] } else { [c, s, p] };
        let mut t = vec![PAD; self.context];
        t[..3].copy_from_slice(&head);
        t[3] = self.eot();
        t
    }

    pub fn caption(&self, a: Attributes) -> Vec<usize> {
        self.caption_with(a, 0)
    }

    pub fn all_tuples(&self) -> Vec<Attributes> {
        let n = self.n_values;
        let mut v = Vec::with_capacity(n * n * n);
        for shape in 0..n {
            for color in 0..n {
                for position in 0..n {
                    v.push(Attributes { shape, color, position });
                }
            }
        }
        v
    }

    /// `2n` held-out tuples `(s, s+k, s+2k+1) mod n` for `k` in {0, 1}; each
    /// attribute value occurs exactly twice, so the remaining tuples keep
    /// uniform marginals.
    pub fn holdout(&self) -> Vec<Attributes> {
        let n = self.n_values;
        let mut v = Vec::with_capacity(2 * n);
        for k in 0..2 {
            for s in 0..n {
                v.push(Attributes {
                    shape: s,
                    color: (s + k) % n,
                    position: (s + 2 * k + 1) % n,
                });
            }
        }
        v.sort();
        v.dedup();
        v
    }

    pub fn train_tuples(&self) -> Vec<Attributes> {
        let held = self.holdout();
        self.all_tuples().into_iter().filter(|a| !held.contains(a)).collect()
    }

    fn tuples(&self, split: Split) -> Vec<Attributes> {
        match split {
            Split::Train | Split::Eval => self.train_tuples(),
            Split::Holdout => self.holdout(),
            Split::All => self.all_tuples(),
        }
    }

    fn rng(&self, split: Split, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(mix(self.seed ^ split.stream().rotate_left(48)) ^ index))
    }

    /// Renders `a` with per-sample jitter and noise from `rng`.
    pub fn render(&self, a: Attributes, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.image_size;
        let grid = Self::grid_for(self.n_values);
        let cell = s / grid;
        let (gy, gx) = (a.position / grid, a.position % grid);
        let (jy, jx) = (rng.gen_range(-1i64..=1), rng.gen_range(-1i64..=1));
        let color = PALETTE[a.color];
        let mut img = vec![0.0; 3 * s * s];
        for v in 0..cell {
            for u in 0..cell {
                if !pattern(a.shape, v, u, cell) {
                    continue;
                }
                let y = (gy * cell + v) as i64 + jy;
                let x = (gx * cell + u) as i64 + jx;
                if y < 0 || x < 0 || y >= s as i64 || x >= s as i64 {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                for ch in 0..3 {
                    img[ch * s * s + y * s + x] = color[ch];
                }
            }
        }
        if self.noise > 0.0 {
            let nd = Normal::new(0.0, self.noise).expect("positive std");
            for p in img.iter_mut() {
                *p += nd.sample(rng);
            }
        }
        for p in img.iter_mut() {
            *p = 2.0 * *p - 0.5;
        }
        img
    }

    /// Sample `index` of `split`; a pure function of (seed, split, index).
    pub fn sample(&self, split: Split, index: u64) -> Sample {
        let tuples = self.tuples(split);
        let mut rng = self.rng(split, index);
        let attrs = tuples[rng.gen_range(0..tuples.len())];
        let image = self.render(attrs, &mut rng);
        Sample {
            attrs,
            image,
            tokens: self.caption(attrs),
        }
    }

    /// Image of fixed attributes, drawn from the `split` stream at `index`.
    pub fn sample_of(&self, attrs: Attributes, split: Split, index: u64) -> Sample {
        let mut rng = self.rng(split, index ^ 0x5eed_0000_0000);
        let image = self.render(attrs, &mut rng);
        Sample {
            attrs,
            image,
            tokens: self.caption(attrs),
        }
    }

    pub fn batch<T: Scalar>(&self, split: Split, start: u64, n: usize) -> Result<Batch<T>> {
        let samples: Vec<Sample> = (0..n as u64).map(|i| self.sample(split, start + i)).collect();
        Self::collate(self.image_size, samples)
    }

    pub fn collate<T: Scalar>(size: usize, samples: Vec<Sample>) -> Result<Batch<T>> {
        let n = samples.len();
        let mut data = Vec::with_capacity(n * 3 * size * size);
        let mut tokens = Vec::new();
        let mut attrs = Vec::with_capacity(n);
        for s in samples {
            data.extend(s.image.into_iter().map(T::of_f64));
            tokens.extend(s.tokens);
            attrs.push(s.attrs);
        }
        Ok(Batch {
            images: Tensor::new(vec![n, 3, size, size], data)?,
            tokens,
            attrs,
        })
    }
}

/// Binary mask of shape `k` on a `cell`×`cell` tile.
fn pattern(k: usize, v: usize, u: usize, cell: usize) -> bool {
    let last = cell - 1;
    let mid = cell / 2;
    let inner = v >= 1 && u >= 1 && v < last && u < last;
    match k {
        // filled square
        0 => inner,
        // hollow square
        1 => inner && (v == 1 || u == 1 || v == last - 1 || u == last - 1),
        // plus
        2 => inner && (v == mid || u == mid),
        // x
        3 => inner && (v == u || v + u == last),
        // horizontal bars
        4 => inner && v % 2 == 1,
        // vertical bars
        5 => inner && u % 2 == 1,
        // checker
        6 => inner && (v + u) % 2 == 0,
        // centre dot
        _ => v + 1 >= mid && v <= mid && u + 1 >= mid && u <= mid,
    }
}
