//! A forward pass bound to a named parameter set.
//!
//! The session caches one leaf per parameter so gradients come back keyed by
//! name, and carries the small composite ops (linear, norms, attention) both
//! model families build their blocks from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Array, ParamSet, Real, Tape, Var};

pub struct Session<'a, R: Real> {
    pub tape: Tape<R>,
    params: &'a ParamSet<R>,
    leaves: RefCell<BTreeMap<String, Var>>,
}

/// Options for [`Session::attention`].
pub struct AttnOpts<'a> {
    pub heads: usize,
    /// Projections carry biases (`.bq/.bk/.bv/.bo`) when true.
    pub bias: bool,
    /// Additive logit mask shared across heads.
    pub mask: Option<Var>,
    /// Rotary positions for queries/keys: (query positions, key positions, base).
    pub rope: Option<(&'a [usize], &'a [usize], f64)>,
}

impl<'a, R: Real> Session<'a, R> {
    pub fn new(params: &'a ParamSet<R>) -> Self {
        Session { tape: Tape::new(), params, leaves: RefCell::new(BTreeMap::new()) }
    }

    /// Leaf var for a named parameter, created once per session.
    pub fn p(&self, name: &str) -> Var {
        if let Some(&v) = self.leaves.borrow().get(name) {
            return v;
        }
        let v = self.tape.leaf(self.params.expect(name));
        self.leaves.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Backward from `loss`, returning gradients keyed by parameter name.
    /// Parameters never touched in this session get zero gradients.
    pub fn grads(&self, loss: Var) -> BTreeMap<String, Array<R>> {
        let g = self.tape.backward(loss);
        let mut out: BTreeMap<String, Array<R>> = self
            .leaves
            .borrow()
            .iter()
            .map(|(n, &v)| (n.clone(), g.of(v)))
            .collect();
        for (name, tensor) in self.params.iter() {
            out.entry(name.clone())
                .or_insert_with(|| Array::zeros(tensor.rows, tensor.cols));
        }
        out
    }

    pub fn linear(&self, x: Var, w: &str, b: Option<&str>) -> Var {
        let y = self.tape.matmul(x, self.p(w));
        match b {
            Some(b) => self.tape.add_row(y, self.p(b)),
            None => y,
        }
    }

    /// Layer norm using `<prefix>.g` / `<prefix>.b`.
    pub fn layer_norm(&self, x: Var, prefix: &str) -> Var {
        self.tape
            .layer_norm(x, self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")))
    }

    /// RMS norm using `<prefix>.g`.
    pub fn rms_norm(&self, x: Var, prefix: &str) -> Var {
        self.tape.rms_norm(x, self.p(&format!("{prefix}.g")))
    }

    /// Multi-head attention; queries from `xq`, keys/values from `xkv`.
    pub fn attention(&self, prefix: &str, xq: Var, xkv: Var, opts: &AttnOpts) -> Var {
        let b = |n: &str| if opts.bias { Some(format!("{prefix}.{n}")) } else { None };
        let q = self.linear(xq, &format!("{prefix}.wq"), b("bq").as_deref());
        let k = self.linear(xkv, &format!("{prefix}.wk"), b("bk").as_deref());
        let v = self.linear(xkv, &format!("{prefix}.wv"), b("bv").as_deref());
        let (_, hidden) = self.tape.shape(q);
        let dh = hidden / opts.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctxs = Vec::with_capacity(opts.heads);
        for h in 0..opts.heads {
            let mut qh = self.tape.slice_cols(q, h * dh, dh);
            let mut kh = self.tape.slice_cols(k, h * dh, dh);
            if let Some((q_pos, k_pos, base)) = opts.rope {
                qh = self.tape.rope(qh, q_pos, base);
                kh = self.tape.rope(kh, k_pos, base);
            }
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let kt = self.tape.transpose(kh);
            let logits = self.tape.scale(self.tape.matmul(qh, kt), scale);
            let logits = match opts.mask {
                Some(m) => self.tape.add(logits, m),
                None => logits,
            };
            let attn = self.tape.softmax_rows(logits);
            ctxs.push(self.tape.matmul(attn, vh));
        }
        let merged = self.tape.concat_cols(&ctxs);
        self.linear(merged, &format!("{prefix}.wo"), b("bo").as_deref())
    }
}
