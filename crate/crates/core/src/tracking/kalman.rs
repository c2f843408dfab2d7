//! Constant-velocity Kalman filter over `(cx, cy, w, h)` and their rates.
//!
//! Noise is scale-relative: every standard deviation is a multiple of the box
//! height, so the filter behaves the same for near and far vehicles.

use nalgebra::{SMatrix, SVector};

use crate::geom::BBox;

pub type StateVector = SVector<f64, 8>;
pub type StateMatrix = SMatrix<f64, 8, 8>;
type MeasVector = SVector<f64, 4>;

/// Position noise as a fraction of box height.
pub const STD_WEIGHT_POSITION: f64 = 1.0 / 20.0;
/// Velocity noise as a fraction of box height.
pub const STD_WEIGHT_VELOCITY: f64 = 1.0 / 160.0;
/// Velocity is unobserved at birth; its prior std is this many box heights
/// per frame so the second measurement effectively fixes it.
pub const BIRTH_VELOCITY_STD: f64 = 100.0;

/// Sizes never drop below this, in pixels.
const MIN_SIZE: f64 = 1e-3;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("degenerate measurement: width {w}, height {h}")]
pub struct DegenerateMeasurement {
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateMatrix,
}

fn transition() -> StateMatrix {
    let mut f = StateMatrix::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn diag_sq(stds: [f64; 8]) -> StateMatrix {
    StateMatrix::from_diagonal(&StateVector::from_iterator(stds.iter().map(|s| s * s)))
}

impl KalmanState {
    /// New track state from a first detection, zero velocity.
    pub fn initiate(b: &BBox) -> Self {
        let c = b.center();
        let mean = StateVector::from_column_slice(&[c.x, c.y, b.w(), b.h(), 0.0, 0.0, 0.0, 0.0]);
        let h = b.h();
        let p = 2.0 * STD_WEIGHT_POSITION * h;
        let v = BIRTH_VELOCITY_STD * h;
        Self { mean, covariance: diag_sq([p, p, p, p, v, v, v, v]) }
    }

    pub fn with_velocity(b: &BBox, velocity: [f64; 4]) -> Self {
        let mut s = Self::initiate(b);
        for (i, v) in velocity.iter().enumerate() {
            s.mean[4 + i] = *v;
        }
        s
    }

    pub fn center(&self) -> (f64, f64) {
        (self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> [f64; 4] {
        [self.mean[4], self.mean[5], self.mean[6], self.mean[7]]
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.mean[0], self.mean[1], self.mean[2].max(MIN_SIZE), self.mean[3].max(MIN_SIZE))
            .expect("kalman state keeps finite positive sizes")
    }

    fn clamp_sizes(&mut self) {
        self.mean[2] = self.mean[2].max(MIN_SIZE);
        self.mean[3] = self.mean[3].max(MIN_SIZE);
    }

    fn symmetrize(&mut self) {
        self.covariance = (self.covariance + self.covariance.transpose()) * 0.5;
    }

    /// Advances one frame under the constant-velocity model.
    pub fn predict(&self) -> KalmanState {
        let h = self.mean[3];
        let p = STD_WEIGHT_POSITION * h;
        let v = STD_WEIGHT_VELOCITY * h;
        let q = diag_sq([p, p, p, p, v, v, v, v]);
        let f = transition();
        let mut next = KalmanState { mean: f * self.mean, covariance: f * self.covariance * f.transpose() + q };
        next.clamp_sizes();
        next.symmetrize();
        next
    }

    /// Corrects the state with a measured box.
    pub fn update(&self, z: &BBox) -> Result<KalmanState, DegenerateMeasurement> {
        let c = z.center();
        self.update_measurement([c.x, c.y, z.w(), z.h()])
    }

    /// Corrects the state with a raw `(cx, cy, w, h)` measurement.
    pub fn update_measurement(&self, z: [f64; 4]) -> Result<KalmanState, DegenerateMeasurement> {
        let [cx, cy, w, h] = z;
        if !(w > 0.0 && h > 0.0) || !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(DegenerateMeasurement { w, h });
        }
        let meas = MeasVector::new(cx, cy, w, h);
        let r_std = STD_WEIGHT_POSITION * self.mean[3];
        let r = SMatrix::<f64, 4, 4>::from_diagonal_element(r_std * r_std);
        let hm = SMatrix::<f64, 4, 8>::identity();

        let projected_mean = hm * self.mean;
        let s = hm * self.covariance * hm.transpose() + r;
        let pht = self.covariance * hm.transpose();
        // gain = P H^T S^-1, via Cholesky on the symmetric innovation covariance
        let gain = match s.cholesky() {
            Some(ch) => ch.solve(&pht.transpose()).transpose(),
            None => pht * s.try_inverse().expect("innovation covariance invertible"),
        };
        let innovation = meas - projected_mean;
        let mean = self.mean + gain * innovation;
        // Joseph form keeps the covariance symmetric PSD
        let ikh = StateMatrix::identity() - gain * hm;
        let covariance = ikh * self.covariance * ikh.transpose() + gain * r * gain.transpose();
        let mut next = KalmanState { mean, covariance };
        next.clamp_sizes();
        next.symmetrize();
        Ok(next)
    }
}
