//! Appearance features for identity matching.
//!
//! The default embedder is a joint RGB colour histogram (8 bins per channel,
//! 512 bins total) over the box crop, L2-normalized. Anything implementing
//! [`AppearanceEmbedder`] can replace it.

use image::RgbImage;
use thiserror::Error;

use crate::geom::BBox;

pub const BINS_PER_CHANNEL: usize = 8;
pub const FEATURE_DIM: usize = BINS_PER_CHANNEL * BINS_PER_CHANNEL * BINS_PER_CHANNEL;

#[derive(Debug, Error, PartialEq)]
pub enum AppearanceError {
    #[error("crop is empty after clipping to the frame")]
    EmptyCrop,
    #[error("zero-length feature vector")]
    ZeroVector,
    #[error("feature dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
}

/// Unit-norm appearance feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature(Vec<f32>);

impl Feature {
    /// Normalizes `values`; fails on an all-zero vector.
    pub fn normalized(values: Vec<f32>) -> Result<Self, AppearanceError> {
        let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(AppearanceError::ZeroVector);
        }
        Ok(Feature(values.into_iter().map(|v| (v as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// Exponential moving average `alpha * self + (1 - alpha) * other`,
    /// renormalized. Falls back to `other` if the blend cancels out.
    pub fn blend(&self, other: &Feature, alpha: f32) -> Feature {
        let mixed: Vec<f32> = self.0.iter().zip(&other.0).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        Feature::normalized(mixed).unwrap_or_else(|_| other.clone())
    }
}

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64, AppearanceError> {
    if a.len() != b.len() {
        return Err(AppearanceError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(AppearanceError::ZeroVector);
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

pub trait AppearanceEmbedder: Send + Sync {
    fn embed(&self, frame: &RgbImage, bbox: &BBox) -> Result<Feature, AppearanceError>;
}

/// Joint RGB histogram embedder.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorHistogram;

impl AppearanceEmbedder for ColorHistogram {
    fn embed(&self, frame: &RgbImage, bbox: &BBox) -> Result<Feature, AppearanceError> {
        appearance_embed(frame, bbox)
    }
}

fn bin(v: u8) -> usize {
    v as usize * BINS_PER_CHANNEL / 256
}

/// Histogram feature of the crop under `bbox`.
pub fn appearance_embed(frame: &RgbImage, bbox: &BBox) -> Result<Feature, AppearanceError> {
    let (x0, y0, x1, y1) = bbox.pixel_rect(frame.width(), frame.height()).ok_or(AppearanceError::EmptyCrop)?;
    let mut hist = vec![0f32; FEATURE_DIM];
    for y in y0..y1 {
        for x in x0..x1 {
            let [r, g, b] = frame.get_pixel(x, y).0;
            hist[(bin(r) * BINS_PER_CHANNEL + bin(g)) * BINS_PER_CHANNEL + bin(b)] += 1.0;
        }
    }
    Feature::normalized(hist)
}
