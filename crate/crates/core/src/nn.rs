//! Named parameter storage and the dense building blocks shared by the trunk
//! and the heads.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered set of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. Panics on a duplicate name, which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Records every tensor as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t)).collect(),
        }
    }
}

/// Parameters recorded on one tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generator for the initial value of parameter `name`. Keying by name makes a
/// tensor's initialization independent of which other parameters exist.
pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Creates parameters under a seed.
pub struct ParamBuilder {
    pub store: ParamStore,
    seed: u64,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            seed,
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = init_rng(self.seed, name);
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..=bound));
        self.store.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let mut rng = init_rng(self.seed, name);
        let t = Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.store.add(name, t)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// `x · W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = pb.xavier(&format!("{name}.w"), d_in, d_out);
        let b = bias.then(|| pb.full(&format!("{name}.b"), &[d_out], 0.0));
        Self { w, b, d_in, d_out }
    }

    pub fn n_params(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&p[self.w])?;
        match self.b {
            Some(b) => y.add(&p[b]),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with a learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            gamma: pb.full(&format!("{name}.gamma"), &[dim], 1.0),
            beta: pb.full(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn n_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layernorm_lastdim().mul(&p[self.gamma])?.add(&p[self.beta])
    }
}

/// Two-layer SiLU feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(pb, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(pb, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn n_params(dim: usize, hidden: usize) -> usize {
        Linear::n_params(dim, hidden, true) + Linear::n_params(hidden, dim, true)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.down.forward(p, &self.up.forward(p, x)?.silu())
    }
}

/// Scaled dot-product multi-head attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{heads} heads do not divide d_model {d_model}"),
            });
        }
        let lin = |pb: &mut ParamBuilder, part: &str| Linear::new(pb, &format!("{name}.{part}"), d_model, d_model, true);
        Ok(Self {
            q: lin(pb, "q"),
            k: lin(pb, "k"),
            v: lin(pb, "v"),
            o: lin(pb, "o"),
            heads,
            d_model,
        })
    }

    pub fn n_params(d_model: usize) -> usize {
        4 * Linear::n_params(d_model, d_model, true)
    }

    /// `xq: [lead.., lq, d]` attends to `xkv: [lead.., lk, d]`. Returns the
    /// output and the attention weights `[prod(lead), heads, lq, lk]`.
    pub fn forward_with_weights<'t>(
        &self,
        p: &Bound<'t>,
        xq: &Var<'t>,
        xkv: &Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (sq, sk) = (xq.shape(), xkv.shape());
        let lead_ok = sq.len() >= 2 && sk.len() == sq.len() && sq[..sq.len() - 2] == sk[..sk.len() - 2];
        if !lead_ok || sq[sq.len() - 1] != self.d_model || sk[sk.len() - 1] != self.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (lq, lk) = (sq[sq.len() - 2], sk[sk.len() - 2]);
        let outer: usize = sq[..sq.len() - 2].iter().product();
        let (h, dh) = (self.heads, self.d_model / self.heads);

        let q = self.q.forward(p, xq)?.reshape(&[outer, lq, h, dh])?.permute(&[0, 2, 1, 3])?;
        let k = self.k.forward(p, xkv)?.reshape(&[outer, lk, h, dh])?.permute(&[0, 2, 3, 1])?;
        let v = self.v.forward(p, xkv)?.reshape(&[outer, lk, h, dh])?.permute(&[0, 2, 1, 3])?;
        let weights = q.matmul(&k)?.scale(1.0 / (dh as f64).sqrt()).softmax_lastdim();
        let ctx = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&sq)?;
        Ok((self.o.forward(p, &ctx)?, weights))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, xq: &Var<'t>, xkv: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(p, xq, xkv)?.0)
    }
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub worst: f64,
    pub worst_name: String,
}

/// Compares tape gradients of `loss` against central differences for every
/// tensor in `store` and for the input `x` (reported as `"input"`).
pub fn gradient_check<F>(store: &ParamStore, x: &Tensor, h: f64, floor: f64, loss: F) -> GradReport
where
    F: for<'t> Fn(&Bound<'t>, Var<'t>) -> Var<'t>,
{
    use crate::autodiff::gradcheck::{max_relative_error, numeric_gradient};

    let tape = Tape::new();
    let p = store.bind(&tape);
    let xv = tape.param(x);
    let grads = tape.backward(loss(&p, xv)).expect("scalar loss");

    let mut all: Vec<Tensor> = store.tensors().to_vec();
    all.push(x.clone());
    let n = store.len();
    let eval = |ts: &[Tensor]| -> f64 {
        let mut s = store.clone();
        s.tensors_mut().clone_from_slice(&ts[..n]);
        let tape = Tape::new();
        let p = s.bind_frozen(&tape);
        loss(&p, tape.constant(&ts[n])).with_value(|v| v[0])
    };
    let mut report = GradReport {
        worst: 0.0,
        worst_name: String::new(),
    };
    for i in 0..=n {
        let var = if i < n { p.vars()[i] } else { xv };
        let numeric = numeric_gradient(&all, i, h, eval);
        let err = max_relative_error(grads.get(var).expect("trainable"), &numeric, floor);
        if err >= report.worst {
            report.worst = err;
            report.worst_name = if i < n { store.names()[i].clone() } else { "input".into() };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{max_relative_error, numeric_gradient};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamBuilder::new(3);
        a.xavier("x", 4, 5);
        let ya = a.xavier("y", 4, 5);
        let mut b = ParamBuilder::new(3);
        let yb = b.xavier("y", 4, 5);
        assert_eq!(a.store.get(ya), b.store.get(yb));
        assert_ne!(a.store.by_name("x"), b.store.by_name("y"));
    }

    #[test]
    fn xavier_within_bound() {
        let mut pb = ParamBuilder::new(0);
        let id = pb.xavier("w", 30, 10);
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(pb.store.get(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut pb = ParamBuilder::new(0);
        pb.full("a", &[1], 0.0);
        pb.full("a", &[1], 0.0);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut pb = ParamBuilder::new(1);
        let att = Attention::new(&mut pb, "att", 8, 2).unwrap();
        let store = pb.finish();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let xq = tape.constant(&rand_tensor(&[3, 5, 8], 2));
        let xk = tape.constant(&rand_tensor(&[3, 7, 8], 3));
        let (out, w) = att.forward_with_weights(&p, &xq, &xk).unwrap();
        assert_eq!(out.shape(), vec![3, 5, 8]);
        assert_eq!(w.shape(), vec![3, 2, 5, 7]);
        w.with_value(|v| {
            for row in v.chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        });
    }

    #[test]
    fn attention_rejects_bad_heads_and_shapes() {
        let mut pb = ParamBuilder::new(1);
        assert!(Attention::new(&mut pb, "bad", 8, 3).is_err());
        let att = Attention::new(&mut pb, "att", 8, 2).unwrap();
        let store = pb.finish();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let xq = tape.constant(&Tensor::zeros(&[2, 5, 8]));
        let xk = tape.constant(&Tensor::zeros(&[3, 5, 8]));
        assert!(att.forward(&p, &xq, &xk).is_err());
    }

    /// Brute-force single-query attention for one head, written with loops.
    #[test]
    fn attention_matches_loop_oracle() {
        let d = 4;
        let mut pb = ParamBuilder::new(5);
        let att = Attention::new(&mut pb, "att", d, 2).unwrap();
        let store = pb.finish();
        let xq = rand_tensor(&[1, 2, d], 6);
        let xk = rand_tensor(&[1, 3, d], 7);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = att
            .forward(&p, &tape.constant(&xq), &tape.constant(&xk))
            .unwrap()
            .value();

        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.get(l.w).data();
            let b = store.get(l.b.unwrap()).data();
            (0..l.d_out)
                .map(|j| b[j] + (0..l.d_in).map(|i| x[i] * w[i * l.d_out + j]).sum::<f64>())
                .collect()
        };
        let rows = |t: &Tensor, n: usize| -> Vec<Vec<f64>> { (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect() };
        let (qs, ks) = (rows(&xq, 2), rows(&xk, 3));
        let dh = d / 2;
        for (i, xqi) in qs.iter().enumerate() {
            let q = lin(&att.q, xqi);
            let mut ctx = vec![0.0; d];
            for h in 0..2 {
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|xk| {
                        let k = lin(&att.k, xk);
                        (0..dh).map(|c| q[h * dh + c] * k[h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, xk) in ks.iter().enumerate() {
                    let v = lin(&att.v, xk);
                    for c in 0..dh {
                        ctx[h * dh + c] += e[j] / z * v[h * dh + c];
                    }
                }
            }
            let o = lin(&att.o, &ctx);
            for c in 0..d {
                assert!((o[c] - out.data()[i * d + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut pb = ParamBuilder::new(seed);
            let att = Attention::new(&mut pb, "att", 4, 2).unwrap();
            let ln = LayerNorm::new(&mut pb, "ln", 4);
            let ff = FeedForward::new(&mut pb, "ff", 4, 6);
            let store = pb.finish();
            let xq = rand_tensor(&[2, 3, 4], 100 + seed);
            let xk = rand_tensor(&[2, 2, 4], 200 + seed);
            let f = |ts: &[Tensor]| -> f64 {
                let mut s = store.clone();
                s.tensors_mut().clone_from_slice(ts);
                let tape = Tape::new();
                let p = s.bind(&tape);
                let a = att.forward(&p, &tape.constant(&xq), &tape.constant(&xk)).unwrap();
                let y = ff.forward(&p, &ln.forward(&p, &a).unwrap()).unwrap();
                y.mul(&y).unwrap().sum().with_value(|v| v[0])
            };
            let tape = Tape::new();
            let p = store.bind(&tape);
            let a = att.forward(&p, &tape.constant(&xq), &tape.constant(&xk)).unwrap();
            let y = ff.forward(&p, &ln.forward(&p, &a).unwrap()).unwrap();
            let g = tape.backward(y.mul(&y).unwrap().sum()).unwrap();
            for (i, v) in p.vars().iter().enumerate() {
                let num = numeric_gradient(store.tensors(), i, 1e-5, f);
                let err = max_relative_error(g.get(*v).unwrap(), &num, 1e-6);
                assert!(err < 1e-4, "seed {seed} param {}: {err}", store.names()[i]);
            }
        }
    }
}
