//! Chunked Monte-Carlo accumulation.
//!
//! A run of `n` draws is cut into fixed-size chunks; chunk `c` draws from
//! `stream.substream(c)` and is reduced to a [`ChunkSummary`]. Chunks may be
//! evaluated on any number of threads, but they are always merged in chunk
//! order, so the pooled result does not depend on the degree of parallelism.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::rng::RngStream;

pub(crate) const CHUNK: usize = 4096;

/// What a chunk needs to keep beyond means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Track {
    /// Per-coordinate variances only.
    Diagonal,
    /// Full covariance plus the dispersion of centered products, from which
    /// standard errors of covariance entries are estimated.
    Covariance,
}

#[derive(Debug, Clone)]
pub(crate) struct ChunkSummary {
    n: usize,
    mean: Vec<f64>,
    /// Co-moment `sum (x_i - mean_i)(x_j - mean_j)`, row-major `k x k`
    /// (diagonal only under [`Track::Diagonal`]).
    comoment: Vec<f64>,
    /// Within-chunk `sum (p_ij - mean p_ij)^2` for centered products `p_ij`.
    product_m2: Vec<f64>,
}

/// Pooled statistics over all chunks.
#[derive(Debug, Clone)]
pub(crate) struct Pooled {
    pub k: usize,
    pub n: usize,
    pub mean: Vec<f64>,
    comoment: Vec<f64>,
    product_m2: Vec<f64>,
    product_dof: usize,
    track: Track,
}

fn summarize(samples: &[f64], k: usize, track: Track) -> ChunkSummary {
    let n = samples.len() / k;
    let mut mean = vec![0.0; k];
    let mut comoment = vec![0.0; k * k];
    let mut delta = vec![0.0; k];
    // Welford; an all-equal chunk yields its value exactly and zero spread.
    for (t, row) in samples.chunks_exact(k).enumerate() {
        let inv = 1.0 / (t + 1) as f64;
        for i in 0..k {
            delta[i] = row[i] - mean[i];
            mean[i] += delta[i] * inv;
        }
        match track {
            Track::Diagonal => {
                for i in 0..k {
                    comoment[i * k + i] += delta[i] * (row[i] - mean[i]);
                }
            }
            Track::Covariance => {
                for i in 0..k {
                    for j in i..k {
                        comoment[i * k + j] += delta[i] * (row[j] - mean[j]);
                    }
                }
            }
        }
    }
    let mut product_m2 = Vec::new();
    if track == Track::Covariance {
        for i in 0..k {
            for j in 0..i {
                comoment[i * k + j] = comoment[j * k + i];
            }
        }
        product_m2 = vec![0.0; k * k];
        if n > 1 {
            let nf = n as f64;
            for i in 0..k {
                for j in i..k {
                    let pbar = comoment[i * k + j] / nf;
                    let mut m2 = 0.0;
                    for row in samples.chunks_exact(k) {
                        let p = (row[i] - mean[i]) * (row[j] - mean[j]) - pbar;
                        m2 += p * p;
                    }
                    product_m2[i * k + j] = m2;
                    product_m2[j * k + i] = m2;
                }
            }
        }
    }
    ChunkSummary {
        n,
        mean,
        comoment,
        product_m2,
    }
}

impl Pooled {
    fn empty(k: usize, track: Track) -> Self {
        Self {
            k,
            n: 0,
            mean: vec![0.0; k],
            comoment: vec![0.0; k * k],
            product_m2: vec![0.0; if track == Track::Covariance { k * k } else { 0 }],
            product_dof: 0,
            track,
        }
    }

    /// Chan et al. pairwise update.
    fn merge(&mut self, c: &ChunkSummary) {
        if c.n == 0 {
            return;
        }
        let k = self.k;
        let (na, nb) = (self.n as f64, c.n as f64);
        let n = na + nb;
        let w = nb / n;
        let d: Vec<f64> = (0..k).map(|i| c.mean[i] - self.mean[i]).collect();
        let scale = na * nb / n;
        for i in 0..k {
            for j in 0..k {
                if self.track == Track::Diagonal && i != j {
                    continue;
                }
                self.comoment[i * k + j] += c.comoment[i * k + j] + d[i] * d[j] * scale;
            }
        }
        for i in 0..k {
            self.mean[i] += d[i] * w;
        }
        if self.track == Track::Covariance && c.n > 1 {
            for (acc, v) in self.product_m2.iter_mut().zip(&c.product_m2) {
                *acc += v;
            }
            self.product_dof += c.n - 1;
        }
        self.n += c.n;
    }

    /// Unbiased sample covariance of coordinates `i` and `j`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.comoment[i * self.k + j] / (self.n - 1) as f64
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.covariance(i, i)
    }

    pub fn mean_se(&self, i: usize) -> f64 {
        (self.variance(i) / self.n as f64).sqrt()
    }

    /// Standard error of [`Self::covariance`], `sqrt(Var[(X_i - mu_i)(X_j - mu_j)] / n)`.
    pub fn covariance_se(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.track, Track::Covariance);
        if self.product_dof == 0 {
            return 0.0;
        }
        let v = self.product_m2[i * self.k + j] / self.product_dof as f64;
        (v / self.n as f64).sqrt()
    }
}

/// Runs `n` draws of a `k`-dimensional sample. `fill` receives the chunk
/// generator and a row-major `rows x k` buffer to overwrite.
pub(crate) fn run<F>(n: usize, k: usize, stream: &RngStream, track: Track, fill: F) -> Pooled
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let summaries: Vec<ChunkSummary> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK.min(n - c * CHUNK);
            let mut buf = vec![0.0; rows * k];
            let mut rng = stream.substream(c as u64).generator();
            fill(&mut rng, &mut buf);
            summarize(&buf, k, track)
        })
        .collect();
    let mut pooled = Pooled::empty(k, track);
    for s in &summaries {
        pooled.merge(s);
    }
    pooled
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pooled_matches_two_pass() {
        let stream = RngStream::new(3, 3);
        let n = 3 * CHUNK + 17;
        let pooled = run(n, 2, &stream, Track::Covariance, |rng, buf| {
            for row in buf.chunks_exact_mut(2) {
                let x: f64 = rng.random();
                row[0] = x;
                row[1] = 2.0 * x + rng.random::<f64>();
            }
        });
        let mut all = Vec::new();
        for c in 0..n.div_ceil(CHUNK) {
            let rows = CHUNK.min(n - c * CHUNK);
            let mut rng = stream.substream(c as u64).generator();
            for _ in 0..rows {
                let x: f64 = rng.random();
                all.push((x, 2.0 * x + rng.random::<f64>()));
            }
        }
        let nf = n as f64;
        let mx = all.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = all.iter().map(|p| p.1).sum::<f64>() / nf;
        let cxy = all.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / (nf - 1.0);
        assert_eq!(pooled.n, n);
        assert!((pooled.mean[0] - mx).abs() < 1e-14);
        assert!((pooled.covariance(0, 1) - cxy).abs() < 1e-14);
        assert_eq!(pooled.covariance(0, 1), pooled.covariance(1, 0));
    }

    #[test]
    fn constant_samples_are_exact() {
        let pooled = run(10_000, 1, &RngStream::new(0, 0), Track::Diagonal, |_, buf| {
            buf.fill(0.1 + 0.2);
        });
        assert_eq!(pooled.mean[0], 0.1 + 0.2);
        assert_eq!(pooled.variance(0), 0.0);
    }

    #[test]
    fn independent_of_thread_count() {
        let f = |rng: &mut ChaCha8Rng, buf: &mut [f64]| {
            for v in buf.iter_mut() {
                *v = rng.random();
            }
        };
        let s = RngStream::new(8, 1);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run(50_000, 3, &s, Track::Covariance, f));
        let b = four.install(|| run(50_000, 3, &s, Track::Covariance, f));
        for i in 0..3 {
            assert_eq!(a.mean[i].to_bits(), b.mean[i].to_bits());
            for j in 0..3 {
                assert_eq!(a.covariance(i, j).to_bits(), b.covariance(i, j).to_bits());
                assert_eq!(a.covariance_se(i, j).to_bits(), b.covariance_se(i, j).to_bits());
            }
        }
    }
}
