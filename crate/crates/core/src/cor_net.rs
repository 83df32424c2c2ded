//! Per-bidder ReLU payment networks `p^Cor_i(V_{-i})`.
//!
//! Each bidder owns an independent block
//! `x ↦ W₃ σ(W₂ σ(W₁ x + b₁) + b₂) + b₃` whose input is `V_{-i}`, so a
//! bidder's own report can never move its correlation payment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::mech::CorPayment;

pub const DEFAULT_WIDTHS: (usize, usize) = (64, 64);
pub const NET_FORMAT: &str = "caama-cor-net/1";

/// Offsets of one bidder's parameters inside the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    d: usize,
    h1: usize,
    h2: usize,
}

impl Layout {
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.h1 * self.d
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.h1 * self.d;
        s..s + self.h1
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.h2 * self.h1
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.h2
    }
    fn w3(&self) -> std::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.h2
    }
    fn b3(&self) -> usize {
        self.w3().end
    }
    fn block_len(&self) -> usize {
        self.b3() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorPaymentNet {
    n: usize,
    m: usize,
    h1: usize,
    h2: usize,
    bias: bool,
    params: Vec<f64>,
}

/// Hidden activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    pub(crate) z1: Vec<f64>,
    pub(crate) a1: Vec<f64>,
    pub(crate) z2: Vec<f64>,
    pub(crate) a2: Vec<f64>,
}

impl CorPaymentNet {
    /// Zero-mean uniform weights with half-width `1/√fan_in`; biases likewise
    /// except the output bias, which starts at 0. Without `bias` every bias
    /// stays pinned at zero.
    pub fn init(n: usize, m: usize, widths: (usize, usize), bias: bool, seed: u64) -> Result<Self> {
        if n < 2 || m == 0 {
            return Err(Error::invalid("net shape", format!("need n >= 2, m >= 1 (got {n}x{m})")));
        }
        let (h1, h2) = widths;
        if h1 == 0 || h2 == 0 {
            return Err(Error::invalid("widths", "hidden widths must be >= 1"));
        }
        let mut net = Self::zeros(n, m, widths, bias);
        let lay = net.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |xs: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let a = 1.0 / (fan_in as f64).sqrt();
            xs.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        };
        for i in 0..n {
            let blk = &mut net.params[i * lay.block_len()..(i + 1) * lay.block_len()];
            fill(&mut blk[lay.w1()], lay.d, &mut rng);
            fill(&mut blk[lay.w2()], h1, &mut rng);
            fill(&mut blk[lay.w3()], h2, &mut rng);
            if bias {
                fill(&mut blk[lay.b1()], lay.d, &mut rng);
                fill(&mut blk[lay.b2()], h1, &mut rng);
            }
        }
        Ok(net)
    }

    pub fn zeros(n: usize, m: usize, widths: (usize, usize), bias: bool) -> Self {
        let (h1, h2) = widths;
        let lay = Layout {
            d: (n - 1) * m,
            h1,
            h2,
        };
        Self {
            n,
            m,
            h1,
            h2,
            bias,
            params: vec![0.0; n * lay.block_len()],
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            d: self.input_width(),
            h1: self.h1,
            h2: self.h2,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.h1, self.h2)
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    /// `(n - 1) · m`
    pub fn input_width(&self) -> usize {
        (self.n - 1) * self.m
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn block(&self, i: usize) -> &[f64] {
        let len = self.layout().block_len();
        &self.params[i * len..(i + 1) * len]
    }

    fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.layout().block_len();
        &mut self.params[i * len..(i + 1) * len]
    }

    /// Range of bidder `i`'s block inside [`Self::params`].
    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        let len = self.layout().block_len();
        i * len..(i + 1) * len
    }

    /// Sets one bidder's weights; matrices are row-major `out × in`.
    #[allow(clippy::too_many_arguments)]
    pub fn set_block(
        &mut self,
        i: usize,
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: &[f64],
        w3: &[f64],
        b3: f64,
    ) -> Result<()> {
        check_index("bidder", i, self.n)?;
        let lay = self.layout();
        check_len("w1", lay.w1().len(), w1.len())?;
        check_len("b1", lay.b1().len(), b1.len())?;
        check_len("w2", lay.w2().len(), w2.len())?;
        check_len("b2", lay.b2().len(), b2.len())?;
        check_len("w3", lay.w3().len(), w3.len())?;
        let bias = self.bias;
        let blk = self.block_mut(i);
        blk[lay.w1()].copy_from_slice(w1);
        blk[lay.w2()].copy_from_slice(w2);
        blk[lay.w3()].copy_from_slice(w3);
        if bias {
            blk[lay.b1()].copy_from_slice(b1);
            blk[lay.b2()].copy_from_slice(b2);
            blk[lay.b3()] = b3;
        } else if b1.iter().chain(b2).any(|b| *b != 0.0) || b3 != 0.0 {
            return Err(Error::invalid("bias", "bias-free network given non-zero biases"));
        }
        Ok(())
    }

    pub fn forward(&self, i: usize, x: &[f64]) -> Result<f64> {
        let mut act = Activations::default();
        self.forward_cached(i, x, &mut act)
    }

    pub fn forward_cached(&self, i: usize, x: &[f64], act: &mut Activations) -> Result<f64> {
        check_index("bidder", i, self.n)?;
        check_len("V_-i", self.input_width(), x.len())?;
        Ok(self.forward_unchecked(i, x, act))
    }

    pub(crate) fn forward_unchecked(&self, i: usize, x: &[f64], act: &mut Activations) -> f64 {
        let lay = self.layout();
        let blk = self.block(i);
        let (w1, b1, w2, b2, w3) = (
            &blk[lay.w1()],
            &blk[lay.b1()],
            &blk[lay.w2()],
            &blk[lay.b2()],
            &blk[lay.w3()],
        );
        act.z1.clear();
        act.a1.clear();
        for (r, b) in b1.iter().enumerate() {
            let z = dot(&w1[r * lay.d..(r + 1) * lay.d], x) + b;
            act.z1.push(z);
            act.a1.push(z.max(0.0));
        }
        act.z2.clear();
        act.a2.clear();
        for (r, b) in b2.iter().enumerate() {
            let z = dot(&w2[r * lay.h1..(r + 1) * lay.h1], &act.a1) + b;
            act.z2.push(z);
            act.a2.push(z.max(0.0));
        }
        dot(w3, &act.a2) + blk[lay.b3()]
    }

    /// Gradient of `upstream · forward(i, x)` with respect to bidder `i`'s
    /// block, laid out like the full parameter vector (other blocks zero).
    pub fn backward(&self, i: usize, x: &[f64], upstream: f64) -> Result<Vec<f64>> {
        let mut act = Activations::default();
        self.forward_cached(i, x, &mut act)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(i, x, &act, upstream, &mut grad);
        Ok(grad)
    }

    /// Accumulates the gradient into `grad` (full parameter layout), using
    /// activations from a preceding forward pass on the same input.
    /// ReLU subgradient at 0 is 0.
    pub(crate) fn backward_into(
        &self,
        i: usize,
        x: &[f64],
        act: &Activations,
        upstream: f64,
        grad: &mut [f64],
    ) {
        if upstream == 0.0 {
            return;
        }
        let lay = self.layout();
        let blk = self.block(i);
        let range = self.block_range(i);
        let g = &mut grad[range];
        let w2 = &blk[lay.w2()];
        let w3 = &blk[lay.w3()];

        if self.bias {
            g[lay.b3()] += upstream;
        }
        let mut d2 = vec![0.0; lay.h2];
        {
            let gw3 = &mut g[lay.w3()];
            for r in 0..lay.h2 {
                gw3[r] += upstream * act.a2[r];
                if act.z2[r] > 0.0 {
                    d2[r] = upstream * w3[r];
                }
            }
        }
        let mut d1 = vec![0.0; lay.h1];
        {
            let w2_off = lay.w2().start;
            for r in 0..lay.h2 {
                let dr = d2[r];
                if dr == 0.0 {
                    continue;
                }
                let row = &w2[r * lay.h1..(r + 1) * lay.h1];
                let grow = &mut g[w2_off + r * lay.h1..w2_off + (r + 1) * lay.h1];
                for c in 0..lay.h1 {
                    grow[c] += dr * act.a1[c];
                    d1[c] += dr * row[c];
                }
            }
            if self.bias {
                let gb2 = &mut g[lay.b2()];
                for r in 0..lay.h2 {
                    gb2[r] += d2[r];
                }
            }
        }
        for c in 0..lay.h1 {
            if act.z1[c] <= 0.0 {
                d1[c] = 0.0;
            }
        }
        let gw1 = &mut g[lay.w1()];
        for r in 0..lay.h1 {
            let dr = d1[r];
            if dr == 0.0 {
                continue;
            }
            for c in 0..lay.d {
                gw1[r * lay.d + c] += dr * x[c];
            }
        }
        if self.bias {
            let gb1 = &mut g[lay.b1()];
            for r in 0..lay.h1 {
                gb1[r] += d1[r];
            }
        }
    }

    /// Largest singular value of `W₁, W₂, W₃` for bidder `i` (biases excluded).
    pub fn spectral_norms(&self, i: usize) -> Result<[f64; 3]> {
        check_index("bidder", i, self.n)?;
        let lay = self.layout();
        let blk = self.block(i);
        Ok([
            spectral_norm(&blk[lay.w1()], lay.h1, lay.d),
            spectral_norm(&blk[lay.w2()], lay.h2, lay.h1),
            spectral_norm(&blk[lay.w3()], 1, lay.h2),
        ])
    }

    /// Zeroes bias entries of a gradient when the network is bias-free.
    pub(crate) fn mask_gradient(&self, grad: &mut [f64]) {
        if self.bias {
            return;
        }
        let lay = self.layout();
        for i in 0..self.n {
            let r = self.block_range(i);
            let g = &mut grad[r];
            g[lay.b1()].fill(0.0);
            g[lay.b2()].fill(0.0);
            g[lay.b3()] = 0.0;
        }
    }

    pub fn to_document(&self) -> NetDocument {
        let lay = self.layout();
        let blocks = (0..self.n)
            .map(|i| {
                let b = self.block(i);
                NetBlockDoc {
                    w1: b[lay.w1()].to_vec(),
                    b1: b[lay.b1()].to_vec(),
                    w2: b[lay.w2()].to_vec(),
                    b2: b[lay.b2()].to_vec(),
                    w3: b[lay.w3()].to_vec(),
                    b3: b[lay.b3()],
                }
            })
            .collect();
        NetDocument {
            format: NET_FORMAT.to_string(),
            n: self.n,
            m: self.m,
            h1: self.h1,
            h2: self.h2,
            bias: self.bias,
            blocks,
        }
    }

    pub fn from_document(doc: &NetDocument) -> Result<Self> {
        if doc.format != NET_FORMAT {
            return Err(Error::invalid("net format", doc.format.clone()));
        }
        if doc.n < 2 || doc.m == 0 || doc.h1 == 0 || doc.h2 == 0 {
            return Err(Error::invalid("net shape", "degenerate dimensions"));
        }
        check_len("net blocks", doc.n, doc.blocks.len())?;
        let mut net = Self::zeros(doc.n, doc.m, (doc.h1, doc.h2), doc.bias);
        for (i, b) in doc.blocks.iter().enumerate() {
            net.set_block(i, &b.w1, &b.b1, &b.w2, &b.b2, &b.w3, b.b3)?;
        }
        Ok(net)
    }
}

impl CorPayment for CorPaymentNet {
    fn payment(&self, bidder: usize, others: &[f64]) -> Result<f64> {
        self.forward(bidder, others)
    }
}

impl Serialize for CorPaymentNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CorPaymentNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = NetDocument::deserialize(d)?;
        Self::from_document(&doc).map_err(serde::de::Error::custom)
    }
}

/// Versioned JSON form of a [`CorPaymentNet`]; matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetDocument {
    pub format: String,
    pub n: usize,
    pub m: usize,
    pub h1: usize,
    pub h2: usize,
    pub bias: bool,
    pub blocks: Vec<NetBlockDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetBlockDoc {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

/// Power iteration on `WᵀW` (100 steps, tolerance 1e-6) for a row-major
/// `rows × cols` matrix.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(w.len(), rows * cols);
    if w.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    // fixed, non-degenerate start vector
    let mut v: Vec<f64> = (0..cols).map(|c| 1.0 + 0.1 * ((c * 7 + 3) % 11) as f64).collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..100 {
        for r in 0..rows {
            u[r] = dot(&w[r * cols..(r + 1) * cols], &v);
        }
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            let ur = u[r];
            for c in 0..cols {
                next[c] += w[r * cols + c] * ur;
            }
        }
        let norm = normalize(&mut next);
        if norm == 0.0 {
            break;
        }
        let s = norm.sqrt();
        v = next;
        let done = (s - sigma).abs() <= 1e-6 * s.max(1.0);
        sigma = s;
        if done {
            break;
        }
    }
    sigma
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
