//! Asymmetric self-attention over Gaussian queries.
//!
//! Inherited queries (`i < x_prev`) may not attend to newly added ones
//! (`j ≥ x_prev`); new queries attend to everything. Queries and keys carry a
//! fixed sinusoidal positional encoding of the Gaussian mean, values do not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::par;

/// Stand-in for −∞ in the mask: the most negative finite value.
pub const MASK_NEG: f64 = f64::MIN;
/// Longest positional-encoding wavelength, in meters.
pub const PE_MAX_WAVELENGTH: f64 = 100.0;

/// Block mask `M[i][j] = −∞ iff i < x_prev ∧ j ≥ x_prev`, stored implicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsaMask {
    pub x_prev: usize,
    pub x_total: usize,
}

impl AsaMask {
    #[inline]
    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        i < self.x_prev && j >= self.x_prev
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if self.is_blocked(i, j) {
            MASK_NEG
        } else {
            0.0
        }
    }

    pub fn blocked_count(&self) -> usize {
        self.x_prev * (self.x_total - self.x_prev)
    }

    /// Row-major dense copy; only sensible for small sizes.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.x_total;
        (0..n * n).map(|k| self.entry(k / n, k % n)).collect()
    }

    /// Number of columns row `i` may attend to.
    #[inline]
    fn visible_columns(&self, i: usize) -> usize {
        if i < self.x_prev {
            self.x_prev
        } else {
            self.x_total
        }
    }
}

pub fn build_mask(x_prev: usize, x_total: usize) -> Result<AsaMask> {
    if x_prev > x_total {
        return Err(Error::invalid(format!(
            "inherited count {x_prev} exceeds total {x_total}"
        )));
    }
    Ok(AsaMask { x_prev, x_total })
}

fn pe_frequencies(per_axis_pairs: usize) -> Vec<f64> {
    let base = std::f64::consts::TAU / PE_MAX_WAVELENGTH;
    // octave ladder, compressed so the shortest wavelength stays above ~3 mm
    let step = if per_axis_pairs > 1 {
        (15.0 / (per_axis_pairs - 1) as f64).min(1.0)
    } else {
        1.0
    };
    (0..per_axis_pairs)
        .map(|k| base * (k as f64 * step).exp2())
        .collect()
}

/// Fixed 3-axis sinusoidal encoding. Layout per axis: `sin ω₀x, cos ω₀x,
/// sin ω₁x, cos ω₁x, …`, axes concatenated x, y, z.
pub fn positional_encoding(mu: &Vec3, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 6 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding width {dim} is not a positive multiple of 6"
        )));
    }
    let freqs = pe_frequencies(dim / 6);
    let mut out = Vec::with_capacity(dim);
    for axis in 0..3 {
        for w in &freqs {
            let (s, c) = (w * mu[axis]).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    Ok(out)
}

/// Encoding for a model width that need not be a multiple of 6: the first
/// `6⌊dim/6⌋` channels hold [`positional_encoding`], the rest are zero.
pub fn positional_encoding_padded(mu: &Vec3, dim: usize) -> Vec<f64> {
    let usable = dim / 6 * 6;
    let mut out = if usable > 0 {
        positional_encoding(mu, usable).expect("width is a multiple of 6")
    } else {
        Vec::new()
    };
    out.resize(dim, 0.0);
    out
}

/// Multi-head projection weights. Matrices are `dim × dim`, row-major,
/// applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub dim: usize,
    pub heads: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl AttentionWeights {
    pub fn new(dim: usize, heads: usize, wq: Vec<f64>, wk: Vec<f64>, wv: Vec<f64>, wo: Vec<f64>) -> Result<Self> {
        let w = AttentionWeights { dim, heads, wq, wk, wv, wo };
        w.validate()?;
        Ok(w)
    }

    /// Xavier-uniform weights from a seed.
    pub fn seeded(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (2 * dim) as f64).sqrt();
        let mut m = || -> Vec<f64> { (0..dim * dim).map(|_| rng.random_range(-bound..bound)).collect() };
        let (wq, wk, wv, wo) = (m(), m(), m(), m());
        Self::new(dim, heads, wq, wk, wv, wo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model width {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        for m in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if m.len() != self.dim * self.dim {
                return Err(Error::invalid("attention matrix has the wrong size"));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("attention weights are not finite"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Tensors `attn.config` (`[dim, heads]`) and `attn.w{q,k,v,o}`.
    pub fn to_tensors(&self) -> crate::sampling::TensorMap {
        let mut t = crate::sampling::TensorMap::new();
        t.insert("attn.config".into(), (vec![2], vec![self.dim as f64, self.heads as f64]));
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            t.insert(format!("attn.{name}"), (vec![self.dim, self.dim], m.clone()));
        }
        t
    }

    /// `None` when the map holds no attention tensors.
    pub fn from_tensors(t: &crate::sampling::TensorMap) -> Result<Option<Self>> {
        let Some((_, c)) = t.get("attn.config") else {
            return Ok(None);
        };
        if c.len() != 2 {
            return Err(Error::Format("attn.config must hold 2 values".into()));
        }
        let (dim, heads) = (c[0] as usize, c[1] as usize);
        let get = |name: &str| -> Result<Vec<f64>> {
            match t.get(&format!("attn.{name}")) {
                Some((shape, v)) if shape[..] == [dim, dim] => Ok(v.clone()),
                Some(_) => Err(Error::Format(format!("attn.{name} has the wrong shape"))),
                None => Err(Error::Format(format!("missing tensor attn.{name}"))),
            }
        };
        Self::new(dim, heads, get("wq")?, get("wk")?, get("wv")?, get("wo")?).map(Some)
    }
}

/// `rows · W` for row-major `rows` (`n × d`) and `W` (`d × d`).
fn matmul(rows: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let n = rows.len() / d;
    let out_rows = par::map_range(n, |i| {
        let x = &rows[i * d..(i + 1) * d];
        let mut o = vec![0.0; d];
        for (k, xk) in x.iter().enumerate() {
            if *xk == 0.0 {
                continue;
            }
            let wr = &w[k * d..(k + 1) * d];
            for (oj, wj) in o.iter_mut().zip(wr) {
                *oj += xk * wj;
            }
        }
        o
    });
    out_rows.concat()
}

struct Projections {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn project(queries: &[f64], positions: &[Vec3], w: &AttentionWeights) -> Projections {
    let d = w.dim;
    let mut with_pe = queries.to_vec();
    for (row, mu) in with_pe.chunks_mut(d).zip(positions) {
        for (x, p) in row.iter_mut().zip(positional_encoding_padded(mu, d)) {
            *x += p;
        }
    }
    Projections {
        q: matmul(&with_pe, &w.wq, d),
        k: matmul(&with_pe, &w.wk, d),
        v: matmul(queries, &w.wv, d),
    }
}

/// Softmax weights of row `i`, head `h`, over the columns the mask leaves
/// open; blocked columns would receive exactly zero and are not materialized.
fn row_weights(p: &Projections, mask: &AsaMask, w: &AttentionWeights, i: usize, h: usize, buf: &mut Vec<f64>) {
    let (d, dh) = (w.dim, w.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let cols = mask.visible_columns(i);
    let qi = &p.q[i * d + h * dh..i * d + (h + 1) * dh];
    buf.clear();
    let mut max = f64::NEG_INFINITY;
    for j in 0..cols {
        let kj = &p.k[j * d + h * dh..j * d + (h + 1) * dh];
        let logit = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + mask.entry(i, j);
        max = max.max(logit);
        buf.push(logit);
    }
    let mut total = 0.0;
    for l in buf.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in buf.iter_mut() {
        *l /= total;
    }
}

fn check_inputs(queries: &[f64], positions: &[Vec3], w: &AttentionWeights, mask: &AsaMask) -> Result<()> {
    w.validate()?;
    let n = mask.x_total;
    if queries.len() != n * w.dim || positions.len() != n {
        return Err(Error::invalid(format!(
            "expected {n} queries of width {} and {n} positions, got {} values and {} positions",
            w.dim,
            queries.len(),
            positions.len()
        )));
    }
    if queries.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("queries are not finite"));
    }
    Ok(())
}

/// Masked multi-head attention `softmax(QKᵀ/√d_h + M) V`, heads concatenated
/// and output-projected. Returns `x_total × dim` row-major.
pub fn asa_forward(
    queries: &[f64],
    positions: &[Vec3],
    w: &AttentionWeights,
    mask: &AsaMask,
) -> Result<Vec<f64>> {
    check_inputs(queries, positions, w, mask)?;
    let n = mask.x_total;
    let (d, dh) = (w.dim, w.head_dim());
    let p = project(queries, positions, w);
    let rows = par::map_range(n, |i| {
        let mut buf = Vec::with_capacity(n);
        let mut concat = vec![0.0; d];
        for h in 0..w.heads {
            row_weights(&p, mask, w, i, h, &mut buf);
            let out = &mut concat[h * dh..(h + 1) * dh];
            for (j, a) in buf.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let vj = &p.v[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, v) in out.iter_mut().zip(vj) {
                    *o += a * v;
                }
            }
        }
        concat
    });
    let out = matmul(&rows.concat(), &w.wo, d);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("attention output is not finite"));
    }
    Ok(out)
}

/// Dense `x_total × x_total` attention probabilities of one head.
pub fn attention_probs(
    queries: &[f64],
    positions: &[Vec3],
    w: &AttentionWeights,
    mask: &AsaMask,
    head: usize,
) -> Result<Vec<f64>> {
    check_inputs(queries, positions, w, mask)?;
    if head >= w.heads {
        return Err(Error::invalid(format!("head {head} out of range")));
    }
    let n = mask.x_total;
    let p = project(queries, positions, w);
    let mut out = vec![0.0; n * n];
    let mut buf = Vec::new();
    for i in 0..n {
        row_weights(&p, mask, w, i, head, &mut buf);
        out[i * n..i * n + buf.len()].copy_from_slice(&buf);
    }
    Ok(out)
}
