use super::TDigest;

/// The piecewise-linear CDF of a non-empty digest as explicit breakpoints.
///
/// Breakpoints are `(min, 0)`, one `(mean, (weight before + weight / 2) / n)`
/// per centroid, and `(max, 1)`. Several breakpoints may share an abscissa
/// (a centroid sitting on an extreme, or a zero-width support); the curve
/// then jumps there, so both one-sided limits are exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfCurve {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl CdfCurve {
    pub(super) fn from_digest(digest: &TDigest) -> Option<Self> {
        let (min, max) = digest.raw_extremes();
        let centroids = digest.centroids();
        if centroids.is_empty() {
            return None;
        }
        let n = digest.total_weight();
        let mut xs = Vec::with_capacity(centroids.len() + 2);
        let mut ys = Vec::with_capacity(centroids.len() + 2);
        xs.push(min);
        ys.push(0.0);
        let mut before = 0.0;
        for c in centroids {
            xs.push(c.mean);
            ys.push(((before + c.weight / 2.0) / n).min(1.0));
            before += c.weight;
        }
        xs.push(max);
        ys.push(1.0);
        Some(Self { xs, ys })
    }

    /// Breakpoint abscissae in ascending order (may repeat).
    pub fn breakpoints(&self) -> &[f64] {
        &self.xs
    }

    pub fn min(&self) -> f64 {
        self.xs[0]
    }

    pub fn max(&self) -> f64 {
        self.xs[self.xs.len() - 1]
    }

    /// `F(x)`, the right-continuous value.
    pub fn right(&self, x: f64) -> f64 {
        if x < self.min() {
            return 0.0;
        }
        if x >= self.max() {
            return 1.0;
        }
        // Last breakpoint at or below x; x < max guarantees a successor.
        let k = self.xs.partition_point(|&v| v <= x) - 1;
        if self.xs[k] == x {
            return self.ys[k];
        }
        interpolate(x, self.xs[k], self.ys[k], self.xs[k + 1], self.ys[k + 1])
    }

    /// `F(x-)`, the limit from the left.
    pub fn left(&self, x: f64) -> f64 {
        if x <= self.min() {
            return 0.0;
        }
        if x > self.max() {
            return 1.0;
        }
        // First breakpoint at or above x; x > min guarantees a predecessor.
        let k = self.xs.partition_point(|&v| v < x);
        if self.xs[k] == x {
            return self.ys[k];
        }
        interpolate(x, self.xs[k - 1], self.ys[k - 1], self.xs[k], self.ys[k])
    }

    /// Smallest `x` with `F(x) >= q`, interpolated along the curve.
    pub fn quantile(&self, q: f64) -> f64 {
        if q >= 1.0 {
            return self.max();
        }
        let k = self.ys.partition_point(|&y| y < q);
        if k == 0 || self.ys[k] == q {
            return self.xs[k];
        }
        let (x0, y0, x1, y1) = (self.xs[k - 1], self.ys[k - 1], self.xs[k], self.ys[k]);
        if y1 > y0 {
            x0 + (q - y0) / (y1 - y0) * (x1 - x0)
        } else {
            x1
        }
    }
}

pub(super) fn interpolate(x: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    if x1 > x0 {
        y0 + (y1 - y0) * ((x - x0) / (x1 - x0))
    } else {
        y1
    }
}
