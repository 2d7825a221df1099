//! Multi-dimensional periodic FFT built from rustfft line transforms.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::lattice::GridSpec;

pub(crate) struct PeriodicFft {
    grid: GridSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    lines: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl PeriodicFft {
    pub fn new(grid: GridSpec) -> Self {
        let n = grid.points_per_axis();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            grid,
            forward,
            inverse,
            lines: Vec::new(),
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// In-place unnormalized transform over all axes.
    pub fn transform(&mut self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { self.inverse.clone() } else { self.forward.clone() };
        let n = self.grid.points_per_axis();
        let total = self.grid.num_sites();
        debug_assert_eq!(data.len(), total);
        // axis 0 lines are contiguous
        plan.process_with_scratch(data, &mut self.scratch);
        for axis in 1..self.grid.dim() {
            let s = self.grid.stride(axis);
            let block = s * n;
            self.lines.resize(block, Complex64::default());
            let mut base = 0;
            while base < total {
                for j in 0..n {
                    let row = &data[base + j * s..base + (j + 1) * s];
                    for (t, v) in row.iter().enumerate() {
                        self.lines[t * n + j] = *v;
                    }
                }
                plan.process_with_scratch(&mut self.lines, &mut self.scratch);
                for j in 0..n {
                    let row = &mut data[base + j * s..base + (j + 1) * s];
                    for (t, v) in row.iter_mut().enumerate() {
                        *v = self.lines[t * n + j];
                    }
                }
                base += block;
            }
        }
    }

    #[cfg(test)]
    pub fn forward_real(&mut self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    /// Inverse transform of a spectrum known to be Hermitian; returns the
    /// normalized real part.
    #[cfg(test)]
    pub fn inverse_real(&mut self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spectrum, true);
        let scale = 1.0 / self.grid.num_sites() as f64;
        spectrum.into_iter().map(|c| c.re * scale).collect()
    }

    /// Applies a real multiplier to two real fields at once by packing them
    /// into the real and imaginary parts.
    pub fn apply_real_multiplier_pair(&mut self, a: &[f64], b: &[f64], multiplier: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.transform(&mut buf, false);
        for (v, m) in buf.iter_mut().zip(multiplier) {
            *v *= *m;
        }
        self.transform(&mut buf, true);
        let scale = 1.0 / self.grid.num_sites() as f64;
        buf.into_iter().map(|c| (c.re * scale, c.im * scale)).unzip()
    }

    pub fn apply_real_multiplier(&mut self, a: &[f64], multiplier: &[f64], out: &mut [f64]) {
        let mut buf: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform(&mut buf, false);
        for (v, m) in buf.iter_mut().zip(multiplier) {
            *v *= *m;
        }
        self.transform(&mut buf, true);
        let scale = 1.0 / self.grid.num_sites() as f64;
        for (o, c) in out.iter_mut().zip(buf) {
            *o = c.re * scale;
        }
    }
}

/// Angles `θ = 2π k / N` of every Fourier mode, per axis.
pub(crate) fn mode_angles(grid: &GridSpec, index: usize) -> [f64; 3] {
    let n = grid.points_per_axis();
    let c = grid.coords(index);
    let mut out = [0.0; 3];
    for axis in 0..grid.dim() {
        out[axis] = 2.0 * PI * c[axis] as f64 / n as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_single_mode() {
        let grid = GridSpec::new(3, 1, 4).unwrap();
        let mut fft = PeriodicFft::new(grid);
        let values: Vec<f64> = (0..grid.num_sites()).map(|i| ((i * 7919) % 13) as f64).collect();
        let spectrum = fft.forward_real(&values);
        let back = fft.inverse_real(spectrum);
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        // cos along axis 2 with k = 1 lands on modes (0,0,1) and (0,0,3)
        let n = grid.points_per_axis();
        let wave: Vec<f64> = (0..grid.num_sites())
            .map(|i| (2.0 * PI * grid.coords(i)[2] as f64 / n as f64).cos())
            .collect();
        let spec = fft.forward_real(&wave);
        for (i, c) in spec.iter().enumerate() {
            let k = grid.coords(i);
            let expected = if k == [0, 0, 1] || k == [0, 0, 3] { 0.5 * grid.num_sites() as f64 } else { 0.0 };
            assert!((c.re - expected).abs() < 1e-9 && c.im.abs() < 1e-9, "{k:?} {c}");
        }
    }
}
