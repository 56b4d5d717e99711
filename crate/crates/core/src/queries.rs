//! Pillar query state: a box hypothesis plus a content feature per query.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Initial pillar height in meters.
pub const PILLAR_HEIGHT: f64 = 4.0;
const SIZE_MEAN: f64 = 2.0;
const SIZE_STD: f64 = 0.5;
const SIZE_MIN: f64 = 0.5;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = theta - two_pi * ((theta + PI) / two_pi).floor();
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w += two_pi;
    }
    w
}

/// Box hypothesis in current-frame ego coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryBox {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
}

impl QueryBox {
    pub fn validate(&self) -> Result<()> {
        let v = self.to_vector();
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::contract(format!("non-finite box {v:?}")));
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(Error::config(format!(
                "box sizes must be positive, got ({}, {}, {})",
                self.w, self.l, self.h
            )));
        }
        Ok(())
    }

    /// `[x, y, z, w, l, h, yaw, vx, vy]`.
    pub fn to_vector(&self) -> [f64; 9] {
        [
            self.x, self.y, self.z, self.w, self.l, self.h, self.yaw, self.vx, self.vy,
        ]
    }

    /// Inverse of [`QueryBox::to_vector`]; wraps the yaw and rejects
    /// non-positive sizes.
    pub fn from_vector(v: [f64; 9]) -> Result<Self> {
        let b = QueryBox {
            x: v[0],
            y: v[1],
            z: v[2],
            w: v[3],
            l: v[4],
            h: v[5],
            yaw: wrap_angle(v[6]),
            vx: v[7],
            vy: v[8],
        };
        b.validate()?;
        Ok(b)
    }

    pub fn center_bev(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// N aligned (box, feature) pairs; features are stored as an `N×D` array.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub boxes: Vec<QueryBox>,
    pub features: DenseArray,
}

impl QuerySet {
    pub fn new(boxes: Vec<QueryBox>, features: DenseArray) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::config("a query set needs at least one query"));
        }
        if features.rank() != 2 || features.shape()[0] != boxes.len() {
            return Err(Error::config(format!(
                "{} boxes but feature shape {:?}",
                boxes.len(),
                features.shape()
            )));
        }
        Ok(Self { boxes, features })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// Initial pillar queries.
///
/// Centers are Gaussian over the region of interest (σ = half extent / 3,
/// clamped to the extent), widths and lengths are `|N(2, 0.5²)|` floored at
/// 0.5 m, yaw is `N(0, (π/2)²)` wrapped. Every pillar sits at `z = 0` with a
/// 4 m height and zero velocity. Features are the learnable embeddings.
pub fn init_queries(
    n: usize,
    seed: u64,
    roi_half_extent: f64,
    embeddings: &DenseArray,
) -> Result<QuerySet> {
    if n < 1 {
        return Err(Error::config("query count must be at least 1"));
    }
    if roi_half_extent.is_nan() || roi_half_extent <= 0.0 {
        return Err(Error::config("roi_half_extent must be positive"));
    }
    if embeddings.rank() != 2 || embeddings.shape()[0] != n {
        return Err(Error::config(format!(
            "need {n} query embeddings, have shape {:?}",
            embeddings.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Normal::new(0.0, roi_half_extent / 3.0).expect("positive std");
    let size = Normal::new(SIZE_MEAN, SIZE_STD).expect("positive std");
    let yaw = Normal::new(0.0, PI / 2.0).expect("positive std");
    let boxes = (0..n)
        .map(|_| {
            let x = center
                .sample(&mut rng)
                .clamp(-roi_half_extent, roi_half_extent);
            let y = center
                .sample(&mut rng)
                .clamp(-roi_half_extent, roi_half_extent);
            let w = size.sample(&mut rng).abs().max(SIZE_MIN);
            let l = size.sample(&mut rng).abs().max(SIZE_MIN);
            let theta = wrap_angle(yaw.sample(&mut rng));
            QueryBox {
                x,
                y,
                z: 0.0,
                w,
                l,
                h: PILLAR_HEIGHT,
                yaw: theta,
                vx: 0.0,
                vy: 0.0,
            }
        })
        .collect();
    QuerySet::new(boxes, embeddings.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_sets_pillar_invariants() {
        let emb = DenseArray::filled(&[50, 8], 0.25);
        let qs = init_queries(50, 9, 30.0, &emb).unwrap();
        assert_eq!(qs.len(), 50);
        for b in &qs.boxes {
            assert_eq!(b.z, 0.0);
            assert_eq!(b.h, 4.0);
            assert_eq!((b.vx, b.vy), (0.0, 0.0));
            assert!(b.w >= 0.5 && b.l >= 0.5);
            assert!(b.x.abs() <= 30.0 && b.y.abs() <= 30.0);
            assert!((-PI..PI).contains(&b.yaw));
        }
        assert_eq!(qs.features, emb);
        assert_eq!(qs, init_queries(50, 9, 30.0, &emb).unwrap());
        assert_ne!(qs.boxes, init_queries(50, 10, 30.0, &emb).unwrap().boxes);
    }

    #[test]
    fn init_rejects_bad_counts() {
        let emb = DenseArray::filled(&[4, 8], 0.0);
        assert!(init_queries(0, 1, 10.0, &emb).is_err());
        assert!(init_queries(3, 1, 10.0, &emb).is_err());
    }

    #[test]
    fn wrap_examples() {
        assert!((wrap_angle(3.0 * PI) - (-PI)).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(0.5), 0.5);
        assert!((wrap_angle(4.0) - (4.0 - 2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(QueryBox::from_vector([0.0; 9]).is_err());
    }

    proptest! {
        #[test]
        fn vector_round_trip(v in prop::array::uniform9(-10.0f64..10.0)) {
            let mut v = v;
            for s in &mut v[3..6] {
                *s = s.abs() + 0.1;
            }
            let b = QueryBox::from_vector(v).unwrap();
            let back = b.to_vector();
            for (i, (a, c)) in v.iter().zip(&back).enumerate() {
                if i == 6 {
                    prop_assert!((wrap_angle(a - c)).abs() < 1e-12);
                } else {
                    prop_assert_eq!(a, c);
                }
            }
            prop_assert_eq!(QueryBox::from_vector(back).unwrap(), b);
        }

        #[test]
        fn wrap_stays_in_range(t in -1e3f64..1e3) {
            let w = wrap_angle(t);
            prop_assert!((-PI..PI).contains(&w));
            prop_assert!(((t - w) / (2.0 * PI)).fract().abs() < 1e-9
                || (1.0 - ((t - w) / (2.0 * PI)).fract().abs()) < 1e-9);
        }
    }
}
