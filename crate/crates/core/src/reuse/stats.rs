use serde::{Serialize, Serializer};

use crate::lsh::Clustering;

/// MAC accounting and reconstruction error for one or more layer calls.
///
/// `macs_reuse` includes the hashing cost, so a layer with no compression
/// costs more than its exact counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReuseStats {
    pub macs_exact: u64,
    pub macs_reuse: u64,
    /// Rows clustered, summed over every clustering involved.
    pub rows: u64,
    /// Clusters produced, summed the same way.
    pub clusters: u64,
    /// Sum of squared output errors, when collection was enabled.
    pub sq_err: Option<f64>,
    /// Number of output entries the error sum covers.
    pub out_elems: u64,
}

impl ReuseStats {
    pub(crate) fn from_clustering(c: &Clustering) -> Self {
        Self {
            rows: c.n_rows() as u64,
            clusters: c.n_clusters() as u64,
            ..Self::default()
        }
    }

    /// Compression ratio `rows / clusters` (1 when nothing was clustered).
    pub fn sigma(&self) -> f64 {
        if self.clusters == 0 {
            1.0
        } else {
            self.rows as f64 / self.clusters as f64
        }
    }

    pub fn recon_mse(&self) -> Option<f64> {
        self.sq_err.map(|s| {
            if self.out_elems == 0 {
                0.0
            } else {
                s / self.out_elems as f64
            }
        })
    }

    /// `(1 − macs_reuse / macs_exact) · 100`.
    pub fn reduction_pct(&self) -> f64 {
        if self.macs_exact == 0 {
            0.0
        } else {
            (1.0 - self.macs_reuse as f64 / self.macs_exact as f64) * 100.0
        }
    }

    /// `macs_exact / macs_reuse`.
    pub fn speedup(&self) -> f64 {
        if self.macs_reuse == 0 {
            1.0
        } else {
            self.macs_exact as f64 / self.macs_reuse as f64
        }
    }

    /// Adds another call's counts. Error sums combine only if both carry one.
    pub fn merge(&mut self, other: &ReuseStats) {
        self.macs_exact += other.macs_exact;
        self.macs_reuse += other.macs_reuse;
        self.rows += other.rows;
        self.clusters += other.clusters;
        self.sq_err = match (self.sq_err, other.sq_err) {
            (Some(a), Some(b)) => Some(a + b),
            (Some(a), None) if other.out_elems == 0 => Some(a),
            (None, Some(b)) if self.out_elems == 0 => Some(b),
            _ => None,
        };
        self.out_elems += other.out_elems;
    }

    pub fn merged<'a>(parts: impl IntoIterator<Item = &'a ReuseStats>) -> ReuseStats {
        let mut total = ReuseStats::default();
        for p in parts {
            total.merge(p);
        }
        total
    }
}

impl Serialize for ReuseStats {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Summary {
            macs_exact: u64,
            macs_reuse: u64,
            rows: u64,
            clusters: u64,
            sigma: f64,
            recon_mse: Option<f64>,
            reduction_pct: f64,
            speedup: f64,
        }
        Summary {
            macs_exact: self.macs_exact,
            macs_reuse: self.macs_reuse,
            rows: self.rows,
            clusters: self.clusters,
            sigma: self.sigma(),
            recon_mse: self.recon_mse(),
            reduction_pct: self.reduction_pct(),
            speedup: self.speedup(),
        }
        .serialize(s)
    }
}
