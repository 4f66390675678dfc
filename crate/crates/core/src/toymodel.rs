//! A tiny causal transformer with hand-written backpropagation.
//!
//! Architecture: token embedding, 1–2 blocks of single-head rotary attention
//! followed by a SiLU MLP (both residual, no normalisation), then a bilinear
//! choice head. Choice `c` scores `mean(E[span_c])ᵀ · H · h` where `h` is the
//! final state of the last prompt token. Only the last row of the final block
//! is ever read, so it is the only row that block computes.
//!
//! All parameters live in one flat `Vec<f64>`; [`ParamLayout`] names the
//! slices. Gradients share the layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::extension::{plan_vanilla, plan_vlat, Method, PositionPlan, RotaryCache};
use crate::matrix::{argmax, softmax};
use crate::rope::{rotate_transpose_accumulate, rotate_with_trig, FrequencyTable};
use crate::synthtask::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(invalid("vocab_size must be positive"));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(invalid(format!("embed_dim must be even, got {}", self.embed_dim)));
        }
        if !(1..=2).contains(&self.n_layers) {
            return Err(invalid(format!("n_layers must be 1 or 2, got {}", self.n_layers)));
        }
        if self.mlp_hidden == 0 {
            return Err(invalid("mlp_hidden must be positive"));
        }
        FrequencyTable::new(self.embed_dim, self.rope_base)?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    d: usize,
    hidden: usize,
    vocab: usize,
    embed: usize,
    layers: Vec<LayerOffsets>,
    head: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.mlp_hidden);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let embed = take(cfg.vocab_size * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerOffsets {
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                w1: take(d * h),
                b1: take(h),
                w2: take(h * d),
                b2: take(d),
            })
            .collect();
        let head = take(d * d);
        Self {
            d,
            hidden: h,
            vocab: cfg.vocab_size,
            embed,
            layers,
            head,
            total: at,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// `(name, range, fan_in)` of every tensor, in storage order. `fan_in` is
    /// zero for biases.
    pub fn tensors(&self) -> Vec<(String, Range<usize>, usize)> {
        let (d, h) = (self.d, self.hidden);
        let mut out = vec![("embed".to_string(), self.embed..self.embed + self.vocab * d, 0)];
        for (l, o) in self.layers.iter().enumerate() {
            for (name, off, len, fan) in [
                ("wq", o.wq, d * d, d),
                ("wk", o.wk, d * d, d),
                ("wv", o.wv, d * d, d),
                ("wo", o.wo, d * d, d),
                ("w1", o.w1, d * h, d),
                ("b1", o.b1, h, 0),
                ("w2", o.w2, h * d, h),
                ("b2", o.b2, d, 0),
            ] {
                out.push((format!("layer{l}.{name}"), off..off + len, fan));
            }
        }
        out.push(("head".to_string(), self.head..self.head + d * d, d));
        out
    }
}

/// Model weights plus the configuration and seed they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    seed: u64,
    weights: Vec<f64>,
    layout: ParamLayout,
    table: FrequencyTable,
}

impl ModelParams {
    /// Gaussian init: embeddings `N(0, 1)`, matrices `N(0, 1/fan_in)`, biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0; layout.len()];
        for (name, range, fan_in) in layout.tensors() {
            let scale = match (name.as_str(), fan_in) {
                ("embed", _) => 1.0,
                (_, 0) => continue,
                (_, fan) => 1.0 / (fan as f64).sqrt(),
            };
            for w in &mut weights[range] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self::from_weights(config, seed, weights)
    }

    pub fn from_weights(config: ModelConfig, seed: u64, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if weights.len() != layout.len() {
            return Err(invalid(format!(
                "expected {} weights, got {}",
                layout.len(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Numeric(format!("weight {i} is not finite")));
        }
        let table = FrequencyTable::new(config.embed_dim, config.rope_base)?;
        Ok(Self {
            config,
            seed,
            weights,
            layout,
            table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn table(&self) -> &FrequencyTable {
        &self.table
    }

    /// Sets the choice head to zero; every choice then scores 0.
    pub fn zero_head(&mut self) {
        let d = self.config.embed_dim;
        let h = self.layout.head;
        self.weights[h..h + d * d].iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn forward(&self, tokens: &[u32], choices: &[Vec<u32>], plan: &PositionPlan) -> Result<Vec<f64>> {
        let cache = self.check_inputs(tokens, choices, plan)?;
        Ok(self.run(tokens, choices, &cache)?.logits)
    }

    pub fn predict(&self, instance: &TaskInstance, plan: &PositionPlan) -> Result<usize> {
        let logits = self.forward(&instance.prompt_tokens(), &instance.choices, plan)?;
        Ok(argmax(&logits).expect("four choices"))
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grads(&self, batch: &[Example<'_>]) -> Result<LossAndGrads> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut grads = vec![0.0; self.layout.len()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (i, ex) in batch.iter().enumerate() {
            if ex.answer >= ex.choices.len() {
                return Err(invalid(format!(
                    "answer {} out of range for {} choices",
                    ex.answer,
                    ex.choices.len()
                )));
            }
            let cache = self.check_inputs(ex.tokens, ex.choices, ex.plan)?;
            let trace = self.run(ex.tokens, ex.choices, &cache).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("batch item {i}: {m}")),
                other => other,
            })?;
            let probs = softmax(&trace.logits);
            loss -= scale * probs[ex.answer].ln();
            let dlogits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(c, p)| scale * (p - if c == ex.answer { 1.0 } else { 0.0 }))
                .collect();
            self.backward(ex.tokens, ex.choices, &cache, &trace, &dlogits, &mut grads);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        Ok(LossAndGrads { loss, grads })
    }

    fn check_inputs(&self, tokens: &[u32], choices: &[Vec<u32>], plan: &PositionPlan) -> Result<RotaryCache> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if tokens.len() != plan.len() {
            return Err(invalid(format!(
                "{} tokens but plan covers {}",
                tokens.len(),
                plan.len()
            )));
        }
        if choices.is_empty() || choices.iter().any(Vec::is_empty) {
            return Err(invalid("choices must be non-empty spans"));
        }
        let vocab = self.config.vocab_size as u32;
        if let Some(t) = tokens.iter().chain(choices.iter().flatten()).find(|&&t| t >= vocab) {
            return Err(invalid(format!("token {t} outside vocabulary of {vocab}")));
        }
        plan.rotary_cache(&self.table)
    }

    fn embed_row(&self, token: u32) -> &[f64] {
        let d = self.config.embed_dim;
        let at = self.layout.embed + token as usize * d;
        &self.weights[at..at + d]
    }

    fn slice(&self, at: usize, len: usize) -> &[f64] {
        &self.weights[at..at + len]
    }

    fn row_start(&self, layer: usize, t: usize) -> usize {
        if layer + 1 == self.layout.layers.len() {
            t - 1
        } else {
            0
        }
    }

    /// Embeds `tokens` and applies the first block's projections, which do
    /// not depend on positions. Reuse the result to score one prompt under
    /// many plans.
    pub fn prepare(&self, tokens: &[u32]) -> Result<PreparedPrompt> {
        let vocab = self.config.vocab_size as u32;
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(invalid(format!("token {t} outside vocabulary of {vocab}")));
        }
        Ok(self.prepare_unchecked(tokens))
    }

    fn prepare_unchecked(&self, tokens: &[u32]) -> PreparedPrompt {
        let x: Vec<f64> = tokens.iter().flat_map(|&tok| self.embed_row(tok).to_vec()).collect();
        let start = self.row_start(0, tokens.len());
        let proj = self.project(&x, start, &self.layout.layers[0]);
        PreparedPrompt {
            tokens: tokens.to_vec(),
            x,
            proj,
        }
    }

    pub fn forward_prepared(
        &self,
        prompt: &PreparedPrompt,
        choices: &[Vec<u32>],
        plan: &PositionPlan,
    ) -> Result<Vec<f64>> {
        let cache = self.check_inputs(&prompt.tokens, choices, plan)?;
        Ok(self.run_prepared(prompt.x.clone(), prompt.proj.clone(), choices, &cache)?.logits)
    }

    fn project(&self, x: &[f64], start: usize, o: &LayerOffsets) -> Projections {
        let d = self.config.embed_dim;
        Projections {
            start,
            q: mat_mul(&x[start * d..], self.slice(o.wq, d * d), d),
            k: mat_mul(x, self.slice(o.wk, d * d), d),
            v: mat_mul(x, self.slice(o.wv, d * d), d),
        }
    }

    fn run(&self, tokens: &[u32], choices: &[Vec<u32>], cache: &RotaryCache) -> Result<Trace> {
        let p = self.prepare_unchecked(tokens);
        self.run_prepared(p.x, p.proj, choices, cache)
    }

    fn run_prepared(
        &self,
        x0: Vec<f64>,
        proj0: Projections,
        choices: &[Vec<u32>],
        cache: &RotaryCache,
    ) -> Result<Trace> {
        let d = self.config.embed_dim;
        let t = x0.len() / d;
        let mut x = x0;
        let mut proj = Some(proj0);
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for (l, off) in self.layout.layers.iter().enumerate() {
            let p = proj
                .take()
                .unwrap_or_else(|| self.project(&x, self.row_start(l, t), off));
            let layer = self.layer_forward(x, p, off, cache);
            x = layer.z.clone();
            layers.push(layer);
        }
        // x now holds the last row only
        let h = x;
        let mut hh = vec![0.0; d];
        mat_vec(self.slice(self.layout.head, d * d), d, &h, &mut hh);
        let means: Vec<Vec<f64>> = choices
            .iter()
            .map(|span| {
                let mut m = vec![0.0; d];
                for &tok in span {
                    add(&mut m, self.embed_row(tok));
                }
                m.iter_mut().for_each(|v| *v /= span.len() as f64);
                m
            })
            .collect();
        let logits: Vec<f64> = means.iter().map(|m| dot(m, &hh)).collect();
        if logits.iter().any(|l| !l.is_finite()) {
            let peak = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            return Err(Error::Numeric(format!(
                "non-finite logits {logits:?}; max |state| {peak:e}"
            )));
        }
        Ok(Trace {
            layers,
            h,
            hh,
            means,
            logits,
        })
    }

    fn layer_forward(&self, x: Vec<f64>, proj: Projections, o: &LayerOffsets, cache: &RotaryCache) -> LayerTrace {
        let d = self.config.embed_dim;
        let hd = self.config.mlp_hidden;
        let t = x.len() / d;
        let start = proj.start;
        let nr = t - start;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let wo = self.slice(o.wo, d * d);
        let (w1, b1, w2, b2) = (
            self.slice(o.w1, d * hd),
            self.slice(o.b1, hd),
            self.slice(o.w2, hd * d),
            self.slice(o.b2, d),
        );

        let v = proj.v;
        let mut kr = vec![0.0; t * d];
        for j in 0..t {
            let row = j * d..(j + 1) * d;
            rotate_with_trig(&proj.k[row.clone()], cache.trig(j), cache.magnitude(j), &mut kr[row]);
        }

        let mut qr = vec![0.0; nr * d];
        let mut attn = vec![0.0; nr * t];
        let mut a = vec![0.0; nr * d];
        let mut y = vec![0.0; nr * d];
        let mut u = vec![0.0; nr * hd];
        let mut g = vec![0.0; nr * hd];
        let mut z = vec![0.0; nr * d];
        for r in 0..nr {
            let i = start + r;
            let xi = &x[i * d..(i + 1) * d];
            let qrow = &mut qr[r * d..(r + 1) * d];
            rotate_with_trig(&proj.q[r * d..(r + 1) * d], cache.trig(i), cache.magnitude(i), qrow);
            let scores: Vec<f64> = (0..=i)
                .map(|j| dot(qrow, &kr[j * d..(j + 1) * d]) * inv_sqrt_d)
                .collect();
            let weights = softmax(&scores);
            let arow = &mut a[r * d..(r + 1) * d];
            for (j, w) in weights.iter().enumerate() {
                axpy(arow, *w, &v[j * d..(j + 1) * d]);
            }
            attn[r * t..r * t + i + 1].copy_from_slice(&weights);

            let yrow = &mut y[r * d..(r + 1) * d];
            vec_mat(arow, wo, d, yrow);
            add(yrow, xi);
            let urow = &mut u[r * hd..(r + 1) * hd];
            vec_mat(yrow, w1, hd, urow);
            add(urow, b1);
            let grow = &mut g[r * hd..(r + 1) * hd];
            for (gk, uk) in grow.iter_mut().zip(urow.iter()) {
                *gk = silu(*uk);
            }
            let zrow = &mut z[r * d..(r + 1) * d];
            vec_mat(grow, w2, d, zrow);
            add(zrow, b2);
            add(zrow, yrow);
        }
        LayerTrace {
            start,
            x,
            qr,
            kr,
            v,
            attn,
            a,
            y,
            u,
            g,
            z,
        }
    }

    fn backward(
        &self,
        tokens: &[u32],
        choices: &[Vec<u32>],
        cache: &RotaryCache,
        trace: &Trace,
        dlogits: &[f64],
        grads: &mut [f64],
    ) {
        let d = self.config.embed_dim;
        let head = self.layout.head;
        let mut dhh = vec![0.0; d];
        for (k, m) in trace.means.iter().enumerate() {
            axpy(&mut dhh, dlogits[k], m);
            let inv = 1.0 / choices[k].len() as f64;
            for &tok in &choices[k] {
                let at = self.layout.embed + tok as usize * d;
                axpy(&mut grads[at..at + d], dlogits[k] * inv, &trace.hh);
            }
        }
        outer_acc(&dhh, &trace.h, &mut grads[head..head + d * d]);
        let mut dz = vec![0.0; d];
        vec_mat(&dhh, self.slice(head, d * d), d, &mut dz);

        for (layer, off) in trace.layers.iter().zip(&self.layout.layers).rev() {
            dz = self.layer_backward(layer, off, cache, &dz, grads);
        }
        for (j, &tok) in tokens.iter().enumerate() {
            let at = self.layout.embed + tok as usize * d;
            add(&mut grads[at..at + d], &dz[j * d..(j + 1) * d]);
        }
    }

    /// Takes the gradient of the rows the layer computed and returns the
    /// gradient of its full input.
    fn layer_backward(
        &self,
        lt: &LayerTrace,
        o: &LayerOffsets,
        cache: &RotaryCache,
        dz: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let d = self.config.embed_dim;
        let hd = self.config.mlp_hidden;
        let t = lt.x.len() / d;
        let nr = t - lt.start;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let mut dy = dz.to_vec();
        let mut dg = vec![0.0; hd];
        let mut du = vec![0.0; hd];
        for r in 0..nr {
            let dzr = &dz[r * d..(r + 1) * d];
            outer_acc(&lt.g[r * hd..(r + 1) * hd], dzr, &mut grads[o.w2..o.w2 + hd * d]);
            add(&mut grads[o.b2..o.b2 + d], dzr);
            dg.iter_mut().for_each(|v| *v = 0.0);
            mat_vec(self.slice(o.w2, hd * d), d, dzr, &mut dg);
            for k in 0..hd {
                du[k] = dg[k] * silu_grad(lt.u[r * hd + k]);
            }
            outer_acc(&lt.y[r * d..(r + 1) * d], &du, &mut grads[o.w1..o.w1 + d * hd]);
            add(&mut grads[o.b1..o.b1 + hd], &du);
            mat_vec(self.slice(o.w1, d * hd), hd, &du, &mut dy[r * d..(r + 1) * d]);
        }

        let mut dx = vec![0.0; t * d];
        let mut da = vec![0.0; nr * d];
        for r in 0..nr {
            let dyr = &dy[r * d..(r + 1) * d];
            add(&mut dx[(lt.start + r) * d..(lt.start + r + 1) * d], dyr);
            outer_acc(&lt.a[r * d..(r + 1) * d], dyr, &mut grads[o.wo..o.wo + d * d]);
            mat_vec(self.slice(o.wo, d * d), d, dyr, &mut da[r * d..(r + 1) * d]);
        }

        let mut dqr = vec![0.0; nr * d];
        let mut dkr = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut ds = vec![0.0; t];
        for r in 0..nr {
            let i = lt.start + r;
            let dar = &da[r * d..(r + 1) * d];
            let w = &lt.attn[r * t..r * t + i + 1];
            let mut inner = 0.0;
            for j in 0..=i {
                let dw = dot(dar, &lt.v[j * d..(j + 1) * d]);
                ds[j] = dw;
                inner += w[j] * dw;
                axpy(&mut dv[j * d..(j + 1) * d], w[j], dar);
            }
            let qrow = &lt.qr[r * d..(r + 1) * d];
            for j in 0..=i {
                let s = w[j] * (ds[j] - inner) * inv_sqrt_d;
                if s != 0.0 {
                    axpy(&mut dqr[r * d..(r + 1) * d], s, &lt.kr[j * d..(j + 1) * d]);
                    axpy(&mut dkr[j * d..(j + 1) * d], s, qrow);
                }
            }
        }

        let mut dpre = vec![0.0; d];
        for r in 0..nr {
            let i = lt.start + r;
            dpre.iter_mut().for_each(|v| *v = 0.0);
            rotate_transpose_accumulate(&dqr[r * d..(r + 1) * d], cache.trig(i), cache.magnitude(i), &mut dpre);
            let xi = &lt.x[i * d..(i + 1) * d];
            outer_acc(xi, &dpre, &mut grads[o.wq..o.wq + d * d]);
            mat_vec(self.slice(o.wq, d * d), d, &dpre, &mut dx[i * d..(i + 1) * d]);
        }
        for j in 0..t {
            let xj = &lt.x[j * d..(j + 1) * d];
            dpre.iter_mut().for_each(|v| *v = 0.0);
            rotate_transpose_accumulate(&dkr[j * d..(j + 1) * d], cache.trig(j), cache.magnitude(j), &mut dpre);
            outer_acc(xj, &dpre, &mut grads[o.wk..o.wk + d * d]);
            mat_vec(self.slice(o.wk, d * d), d, &dpre, &mut dx[j * d..(j + 1) * d]);
            let dvj = &dv[j * d..(j + 1) * d];
            outer_acc(xj, dvj, &mut grads[o.wv..o.wv + d * d]);
            mat_vec(self.slice(o.wv, d * d), d, dvj, &mut dx[j * d..(j + 1) * d]);
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Projections {
    start: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

/// A prompt with its position-independent first-block work done.
#[derive(Debug, Clone)]
pub struct PreparedPrompt {
    tokens: Vec<u32>,
    x: Vec<f64>,
    proj: Projections,
}

struct LayerTrace {
    start: usize,
    x: Vec<f64>,
    qr: Vec<f64>,
    kr: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    z: Vec<f64>,
}

struct Trace {
    layers: Vec<LayerTrace>,
    h: Vec<f64>,
    hh: Vec<f64>,
    means: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// One training example: prompt, its position plan, and candidate spans.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: &'a [u32],
    pub choices: &'a [Vec<u32>],
    pub plan: &'a PositionPlan,
    pub answer: usize,
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<f64>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(out: &mut [f64], x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += v);
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += alpha * v);
}

/// `out = x · W` for row vector `x` and row-major `W` with `cols` columns.
fn vec_mat(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (r, xr) in x.iter().enumerate() {
        if *xr != 0.0 {
            axpy(out, *xr, &w[r * cols..(r + 1) * cols]);
        }
    }
}

/// `X · W` for row-major `X` (rows of `W.len() / cols`) and `W`. Rows of `X`
/// are processed in small tiles so each row of `W` is reused from cache.
fn mat_mul(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    const TILE: usize = 8;
    let inner = w.len() / cols;
    let rows = x.len() / inner;
    let mut out = vec![0.0; rows * cols];
    for t0 in (0..rows).step_by(TILE) {
        let t1 = (t0 + TILE).min(rows);
        for k in 0..inner {
            let wrow = &w[k * cols..(k + 1) * cols];
            for i in t0..t1 {
                let xik = x[i * inner + k];
                if xik != 0.0 {
                    axpy(&mut out[i * cols..(i + 1) * cols], xik, wrow);
                }
            }
        }
    }
    out
}

/// `out += W · v` for row-major `W` with `cols` columns.
fn mat_vec(w: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], v);
    }
}

/// `out += a ⊗ b`.
fn outer_acc(a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = b.len();
    for (i, ai) in a.iter().enumerate() {
        if *ai != 0.0 {
            axpy(&mut out[i * n..(i + 1) * n], *ai, b);
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl AdamW {
    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        let lr = self.learning_rate;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] *= 1.0 - lr * self.weight_decay;
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

/// Distribution of the virtual window factor during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VlatStrategy {
    None,
    Default,
    Dense100,
    Dense1000,
    LimitedRange,
    FixedHigh,
}

impl VlatStrategy {
    pub const ALL: [VlatStrategy; 6] = [
        VlatStrategy::None,
        VlatStrategy::Default,
        VlatStrategy::Dense100,
        VlatStrategy::Dense1000,
        VlatStrategy::LimitedRange,
        VlatStrategy::FixedHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VlatStrategy::None => "none",
            VlatStrategy::Default => "default",
            VlatStrategy::Dense100 => "dense100",
            VlatStrategy::Dense1000 => "dense1000",
            VlatStrategy::LimitedRange => "limited",
            VlatStrategy::FixedHigh => "fixed20",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "vanilla" => Ok(VlatStrategy::None),
            "default" => Ok(VlatStrategy::Default),
            "dense100" => Ok(VlatStrategy::Dense100),
            "dense1000" => Ok(VlatStrategy::Dense1000),
            "limited" | "limited-range" => Ok(VlatStrategy::LimitedRange),
            "fixed20" | "fixed-high" => Ok(VlatStrategy::FixedHigh),
            other => Err(invalid(format!("unknown VLAT strategy `{other}`"))),
        }
    }

    /// The factors a draw is uniform over; `None` for no augmentation.
    pub fn factors(self) -> Option<Vec<f64>> {
        let dense = |n: usize| (0..n).map(|i| 1.0 + 24.0 * i as f64 / (n - 1) as f64).collect();
        match self {
            VlatStrategy::None => None,
            VlatStrategy::Default => Some(vec![1.0, 5.0, 10.0, 15.0, 20.0, 25.0]),
            VlatStrategy::Dense100 => Some(dense(100)),
            VlatStrategy::Dense1000 => Some(dense(1000)),
            VlatStrategy::LimitedRange => Some(vec![1.0, 5.0, 10.0]),
            VlatStrategy::FixedHigh => Some(vec![20.0]),
        }
    }
}

impl std::fmt::Display for VlatStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sample_virtual_factor<R: Rng + ?Sized>(strategy: VlatStrategy, rng: &mut R) -> Result<f64> {
    let factors = strategy
        .factors()
        .ok_or_else(|| Error::Contract("no factor to draw without a VLAT strategy".into()))?;
    Ok(factors[rng.gen_range(0..factors.len())])
}

/// Whole-sequence YaRN is known to diverge under virtual-length training.
pub fn check_training_method(method: Method, strategy: VlatStrategy) -> Result<()> {
    if method == Method::WholeYarn && strategy != VlatStrategy::None {
        return Err(Error::Contract(
            "whole-yarn cannot be combined with VLAT training".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Audio tokens the virtual window factor multiplies.
    pub base_audio_context: usize,
    /// Replaces every factor draw when set.
    pub forced_factor: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 8,
            grad_clip_norm: 1.0,
            epochs: 1,
            weight_decay: 0.01,
            seed: 0,
            base_audio_context: 8,
            forced_factor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(invalid(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        if self.base_audio_context == 0 {
            return Err(invalid("base_audio_context must be positive"));
        }
        if let Some(f) = self.forced_factor {
            if !(f > 0.0) || !f.is_finite() {
                return Err(invalid(format!("forced factor must be positive, got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochStats>,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: LossTrace,
}

const ORDER_STREAM: u64 = 0x6f72_6465_7273;
const FACTOR_STREAM: u64 = 0x6661_6374_6f72;

/// Plan for one training sample under `strategy`.
pub fn training_plan(
    instance: &TaskInstance,
    strategy: VlatStrategy,
    factor: Option<f64>,
    base_audio_context: usize,
    table: &FrequencyTable,
) -> Result<PositionPlan> {
    let layout = instance.prompt_layout();
    match (strategy, factor) {
        (VlatStrategy::None, _) | (_, None) => Ok(plan_vanilla(layout.total_tokens())),
        (_, Some(f)) => {
            let window = ((base_audio_context as f64 * f).round() as usize).max(1);
            plan_vlat(&layout, window, 0, 1.0, table)
        }
    }
}

/// Trains in place of a copy of `model`. A fresh virtual window factor is
/// drawn for every sample in every epoch.
pub fn train(
    model: &ModelParams,
    dataset: &[TaskInstance],
    cfg: &TrainConfig,
    strategy: VlatStrategy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    let mut params = model.clone();
    let mut opt = AdamW::new(params.weights.len(), cfg.learning_rate, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ORDER_STREAM);
    let mut factor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ FACTOR_STREAM);
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut prepared = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let inst = &dataset[idx];
                let factor = match strategy {
                    VlatStrategy::None => None,
                    s => Some(match cfg.forced_factor {
                        Some(f) => f,
                        None => sample_virtual_factor(s, &mut factor_rng)?,
                    }),
                };
                let plan = training_plan(inst, strategy, factor, cfg.base_audio_context, &params.table)?;
                prepared.push((inst.prompt_tokens(), plan));
            }
            let batch: Vec<Example<'_>> = prepared
                .iter()
                .zip(chunk)
                .map(|((tokens, plan), &idx)| Example {
                    tokens,
                    choices: &dataset[idx].choices,
                    plan,
                    answer: dataset[idx].answer_index,
                })
                .collect();
            let step = trace.step_losses.len();
            let mut lg = match params.loss_and_grads(&batch) {
                Ok(lg) => lg,
                Err(Error::Numeric(m)) => {
                    return Err(Error::Diverged {
                        message: format!("epoch {epoch} step {step}: {m}"),
                        losses: trace.step_losses,
                    })
                }
                Err(e) => return Err(e),
            };
            clip_grad_norm(&mut lg.grads, cfg.grad_clip_norm);
            opt.step(&mut params.weights, &lg.grads);
            if let Some(i) = params.weights.iter().position(|w| !w.is_finite()) {
                trace.step_losses.push(lg.loss);
                return Err(Error::Diverged {
                    message: format!("epoch {epoch} step {step}: weight {i} became non-finite"),
                    losses: trace.step_losses,
                });
            }
            trace.step_losses.push(lg.loss);
            epoch_loss += lg.loss;
            steps += 1;
        }
        trace.epochs.push(EpochStats {
            epoch,
            mean_loss: epoch_loss / steps as f64,
            steps,
        });
    }
    Ok(TrainOutcome { params, trace })
}

/// Accuracy with `plan_for` choosing each instance's positions.
pub fn evaluate<F>(model: &ModelParams, instances: &[TaskInstance], mut plan_for: F) -> Result<f64>
where
    F: FnMut(&TaskInstance) -> Result<PositionPlan>,
{
    let predictions = predict_all(model, instances, &mut plan_for)?;
    crate::synthtask::score(&predictions, instances)
}

pub fn predict_all<F>(model: &ModelParams, instances: &[TaskInstance], mut plan_for: F) -> Result<Vec<usize>>
where
    F: FnMut(&TaskInstance) -> Result<PositionPlan>,
{
    instances
        .iter()
        .map(|inst| model.predict(inst, &plan_for(inst)?))
        .collect()
}

/// Accuracy of each of `n_cells` plan choices; `plan_for(instance, cell)`.
/// Every prompt is prepared once and shared by all cells.
pub fn evaluate_grid<F>(
    model: &ModelParams,
    instances: &[TaskInstance],
    n_cells: usize,
    mut plan_for: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&TaskInstance, usize) -> Result<PositionPlan>,
{
    let mut correct = vec![0usize; n_cells];
    for inst in instances {
        let prompt = model.prepare(&inst.prompt_tokens())?;
        for (cell, hits) in correct.iter_mut().enumerate() {
            let logits = model.forward_prepared(&prompt, &inst.choices, &plan_for(inst, cell)?)?;
            if argmax(&logits) == Some(inst.answer_index) {
                *hits += 1;
            }
        }
    }
    let n = instances.len().max(1) as f64;
    Ok(correct.into_iter().map(|c| c as f64 / n).collect())
}

const CHECKPOINT_MAGIC: &str = "AUDIOCTX-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub n_params: usize,
    pub config_hash: String,
}

/// Writes a magic line, a one-line JSON header, then the weights as
/// little-endian `f64` in storage order.
pub fn write_checkpoint<W: Write>(model: &ModelParams, mut out: W) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config,
        seed: model.seed,
        n_params: model.weights.len(),
        config_hash: model.config.hash(),
    };
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    let json = serde_json::to_string(&header).map_err(|e| Error::Io(e.into()))?;
    writeln!(out, "{json}")?;
    for w in &model.weights {
        out.write_all(&w.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<ModelParams> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            line: 1,
            message: "not a checkpoint file".into(),
        });
    }
    line.clear();
    input.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| Error::Parse {
        line: 2,
        message: e.to_string(),
    })?;
    if header.config_hash != header.config.hash() {
        return Err(Error::Parse {
            line: 2,
            message: "config hash mismatch".into(),
        });
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != header.n_params * 8 {
        return Err(invalid(format!(
            "checkpoint holds {} bytes of weights, expected {}",
            bytes.len(),
            header.n_params * 8
        )));
    }
    let weights = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ModelParams::from_weights(header.config, header.seed, weights)
}

pub fn save_checkpoint(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
