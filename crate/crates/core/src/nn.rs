//! Parameter store, deterministic initialization, layer compositions, Adam.
//!
//! Parameters live in a `ParamStore` keyed by dotted names ("agg.k.w",
//! "trans.ffn.b1", ...). Each forward pass binds the names it touches onto
//! a fresh tape through a [`Ctx`]; frozen names bind as constants so they
//! are structurally outside the gradient. Initialization draws every
//! tensor from its own named rng stream, so adding or reordering
//! parameters never shifts another parameter's initial values.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::make_rng;
use crate::tape::{Arr, Grads, NodeId, Tape};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Arr> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Digest over names, shapes and exact bytes; used to prove that frozen
    /// parameters never move during training.
    pub fn hash_subset(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.map {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0]);
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> String {
        self.hash_subset("")
    }
}

/// Deterministic initializers. Every parameter draws from the stream
/// `init/<name>` of the run seed.
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    fn stream(&self, name: &str) -> crate::rng::Stream {
        make_rng(self.seed, &format!("init/{name}"))
    }

    /// Normal(0, std).
    pub fn normal(&self, store: &mut ParamStore, name: &str, shape: &[usize], std: f64) {
        let mut rng = self.stream(name);
        let mut a = Arr::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = rng.normal() * std;
        }
        store.insert(name, a);
    }

    /// Fan-in scaled normal for linear weights `[fan_in, fan_out]`.
    pub fn linear(&self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.normal(store, &format!("{prefix}.w"), &[fan_in, fan_out], std);
        store.insert(&format!("{prefix}.b"), Arr::zeros(IxDyn(&[fan_out])));
    }

    pub fn layer_norm(&self, store: &mut ParamStore, prefix: &str, dim: usize) {
        store.insert(&format!("{prefix}.g"), Arr::ones(IxDyn(&[dim])));
        store.insert(&format!("{prefix}.b"), Arr::zeros(IxDyn(&[dim])));
    }

    pub fn zeros(&self, store: &mut ParamStore, name: &str, shape: &[usize]) {
        store.insert(name, Arr::zeros(IxDyn(shape)));
    }
}

/// Binds store parameters onto a tape for one forward pass.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    frozen_prefixes: Vec<String>,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            frozen_prefixes: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    pub fn with_frozen(store: &'a ParamStore, frozen_prefixes: &[&str]) -> Self {
        let mut ctx = Ctx::new(store);
        ctx.frozen_prefixes = frozen_prefixes.iter().map(|s| s.to_string()).collect();
        ctx
    }

    /// All parameters bind as constants (pure evaluation).
    pub fn frozen_all(store: &'a ParamStore) -> Self {
        Ctx::with_frozen(store, &[""])
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Binds (or reuses) the tape node for a named parameter.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self.store.get(name).clone();
        let id = if self.is_frozen(name) {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients for every bound trainable parameter; zero arrays for bound
    /// trainable parameters the loss never touched, nothing for frozen ones.
    pub fn collect_grads(&self, grads: &Grads) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if !self.tape.requires_grad(id) {
                continue;
            }
            let g = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Arr::zeros(self.store.get(name).raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }

    // ----- layer compositions -----

    pub fn linear(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b, 1e-5)
    }

    /// Two-layer relu MLP `{prefix}.w1/b1/w2/b2`.
    pub fn mlp2(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let h = self.linear(&format!("{prefix}.l1"), x);
        let h = self.tape.relu(h);
        self.linear(&format!("{prefix}.l2"), h)
    }

    /// GRU cell over row-wise tokens: `input, hidden: [n, c] -> [n, c]`.
    pub fn gru_cell(&mut self, prefix: &str, input: NodeId, hidden: NodeId) -> NodeId {
        let lin = |ctx: &mut Self, name: &str, x: NodeId| {
            let w = ctx.param(&format!("{prefix}.{name}.w"));
            ctx.tape.matmul(x, w)
        };
        let bias = |ctx: &mut Self, name: &str| ctx.param(&format!("{prefix}.{name}"));

        let wr = lin(self, "w_r", input);
        let ur = lin(self, "u_r", hidden);
        let br = bias(self, "b_r");
        let r = {
            let s = self.tape.add(wr, ur);
            let s = self.tape.add(s, br);
            self.tape.sigmoid(s)
        };
        let wz = lin(self, "w_z", input);
        let uz = lin(self, "u_z", hidden);
        let bz = bias(self, "b_z");
        let z = {
            let s = self.tape.add(wz, uz);
            let s = self.tape.add(s, bz);
            self.tape.sigmoid(s)
        };
        let wn = lin(self, "w_n", input);
        let bni = bias(self, "b_ni");
        let un = lin(self, "u_n", hidden);
        let bnh = bias(self, "b_nh");
        let n = {
            let hn = self.tape.add(un, bnh);
            let rh = self.tape.mul(r, hn);
            let s = self.tape.add(wn, bni);
            let s = self.tape.add(s, rh);
            self.tape.tanh(s)
        };
        // h' = (1 - z) * n + z * h
        let zn = self.tape.mul(z, n);
        let zh = self.tape.mul(z, hidden);
        let n_minus_zn = self.tape.sub(n, zn);
        self.tape.add(n_minus_zn, zh)
    }

    /// Single-head scaled dot-product attention with projections
    /// `{prefix}.q/k/v/o`: queries from `target`, keys/values from `memory`.
    pub fn attention(&mut self, prefix: &str, target: NodeId, memory: NodeId) -> NodeId {
        let c = self.tape.value(target).shape()[1];
        let q = self.linear(&format!("{prefix}.q"), target);
        let k = self.linear(&format!("{prefix}.k"), memory);
        let v = self.linear(&format!("{prefix}.v"), memory);
        let kt = self.tape.transpose(k);
        let logits = self.tape.matmul(q, kt);
        let logits = self.tape.scale(logits, 1.0 / (c as f64).sqrt());
        let attn = self.tape.softmax(logits, 1); // over memory positions
        let mixed = self.tape.matmul(attn, v);
        self.linear(&format!("{prefix}.o"), mixed)
    }
}

/// Adam with linear warmup, cosine decay and global-norm gradient clipping.
pub struct Adam {
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one update. `grads` may cover a subset of the store; missing
    /// names are untouched. Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &mut BTreeMap<String, Arr>,
        lr: f64,
        grad_clip: f64,
    ) -> Result<f64> {
        let mut sq = 0.0;
        for g in grads.values() {
            for &x in g.iter() {
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric(format!("gradient norm is {norm}")));
        }
        if grad_clip > 0.0 && norm > grad_clip {
            let s = grad_clip / norm;
            for g in grads.values_mut() {
                g.mapv_inplace(|x| x * s);
            }
        }

        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / b1t;
                    let vhat = *v / b2t;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(norm)
    }
}

/// Warmup-then-cosine learning rate at a given step (0-based).
pub fn lr_at(step: u64, total: u64, base: f64, warmup: u64, min_factor: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = warmup.min(total);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
    base * (min_factor + (1.0 - min_factor) * cos)
}
