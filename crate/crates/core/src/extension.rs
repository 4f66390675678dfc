//! Context-extension methods expressed as position plans.
//!
//! Every method, from plain RoPE to audio-only YaRN and virtual-length
//! training windows, is materialised the same way: a [`PositionPlan`] holds,
//! per token, the position used by the *interpolated* (low-frequency) pair
//! group, the position used by the *extrapolated* (high-frequency) pair group,
//! and a rotation magnitude. Frequencies themselves are never modified; the
//! attention kernels multiply plan positions with the unmodified
//! [`FrequencyTable`].
//!
//! Pair-group convention: pairs with index `>= cutoff_pair` are interpolated,
//! pairs below it are extrapolated. A cutoff of 0 interpolates every pair.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::layout::{AudioWindow, SequenceLayout};
use crate::rope::FrequencyTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    WholePi,
    WholeYarn,
    PartialPi,
    #[serde(rename = "partial-yarn")]
    PartialYarn2,
    PartialYarn3,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vanilla,
        Method::WholePi,
        Method::WholeYarn,
        Method::PartialPi,
        Method::PartialYarn2,
        Method::PartialYarn3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::WholePi => "whole-pi",
            Method::WholeYarn => "whole-yarn",
            Method::PartialPi => "partial-pi",
            Method::PartialYarn2 => "partial-yarn",
            Method::PartialYarn3 => "partial-yarn3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "vanilla" | "none" => Method::Vanilla,
            "whole-pi" | "pi" => Method::WholePi,
            "whole-yarn" | "yarn" => Method::WholeYarn,
            "partial-pi" => Method::PartialPi,
            "partial-yarn" | "partial-yarn2" => Method::PartialYarn2,
            "partial-yarn3" => Method::PartialYarn3,
            _ => return Err(invalid(format!("unknown extension method `{s}`"))),
        })
    }

    pub fn is_partial(self) -> bool {
        matches!(
            self,
            Method::PartialPi | Method::PartialYarn2 | Method::PartialYarn3
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Method choice plus the audio window being stretched.
///
/// `anchor_audio_tokens` is the familiar window (the nominal audio context or
/// an empirically observed one); `target_audio_tokens` is the audio length to
/// fit into it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtensionConfig {
    pub method: Method,
    pub anchor_audio_tokens: usize,
    pub target_audio_tokens: usize,
    pub cutoff_pair: usize,
    pub temperature: f64,
}

impl ExtensionConfig {
    pub fn new(
        method: Method,
        anchor_audio_tokens: usize,
        target_audio_tokens: usize,
        cutoff_pair: usize,
        temperature: f64,
    ) -> Result<Self> {
        if anchor_audio_tokens == 0 || target_audio_tokens == 0 {
            return Err(invalid("anchor and target audio lengths must be positive"));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        if method == Method::PartialPi && (cutoff_pair != 0 || temperature != 1.0) {
            return Err(invalid(
                "partial-pi is fixed at cutoff 0 and temperature 1.0",
            ));
        }
        Ok(Self {
            method,
            anchor_audio_tokens,
            target_audio_tokens,
            cutoff_pair,
            temperature,
        })
    }

    pub fn vanilla(audio_tokens: usize) -> Result<Self> {
        Self::new(Method::Vanilla, audio_tokens, audio_tokens, 0, 1.0)
    }

    pub fn partial_pi(anchor: usize, target: usize) -> Result<Self> {
        Self::new(Method::PartialPi, anchor, target, 0, 1.0)
    }

    pub fn partial_yarn(anchor: usize, target: usize, cutoff_pair: usize, temperature: f64) -> Result<Self> {
        Self::new(Method::PartialYarn2, anchor, target, cutoff_pair, temperature)
    }

    pub fn whole_pi(anchor: usize, target: usize) -> Result<Self> {
        Self::new(Method::WholePi, anchor, target, 0, 1.0)
    }

    pub fn whole_yarn(anchor: usize, target: usize) -> Result<Self> {
        Self::new(Method::WholeYarn, anchor, target, 0, 1.0)
    }

    /// `s = target / anchor`.
    pub fn extension_factor(&self) -> f64 {
        self.target_audio_tokens as f64 / self.anchor_audio_tokens as f64
    }
}

/// Ramp and logit-scale constants for the three-group (whole-context) YaRN
/// scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YarnParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for YarnParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 32.0,
        }
    }
}

impl YarnParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < beta && beta.is_finite()) {
            return Err(invalid(format!(
                "ramp thresholds need 0 < alpha < beta, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Factor applied to attention logits for extension factor `s`:
    /// `0.1·ln(s) + 1`, clamped to 1 when nothing is being extended.
    pub fn logit_scale(s: f64) -> f64 {
        if s <= 1.0 {
            1.0
        } else {
            0.1 * s.ln() + 1.0
        }
    }

    /// Per-pair interpolation weights in `[0, 1]` for a context of
    /// `context_len` tokens.
    ///
    /// A pair completing fewer than `alpha` turns over the context is fully
    /// interpolated (weight 1); one completing more than `beta` turns is left
    /// alone (weight 0); pairs in between are ramped linearly.
    pub fn ramp_weights(&self, table: &FrequencyTable, context_len: f64) -> Vec<f64> {
        (0..table.num_pairs())
            .map(|i| {
                let turns = context_len / table.wavelength(i);
                let gamma = ((turns - self.alpha) / (self.beta - self.alpha)).clamp(0.0, 1.0);
                1.0 - gamma
            })
            .collect()
    }
}

/// Two-group partition of pair indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub cutoff_pair: usize,
}

impl GroupSplit {
    pub fn is_interpolated(&self, pair: usize) -> bool {
        pair >= self.cutoff_pair
    }

    pub fn interp_pairs(&self, num_pairs: usize) -> Range<usize> {
        self.cutoff_pair.min(num_pairs)..num_pairs
    }

    pub fn extrap_pairs(&self, num_pairs: usize) -> Range<usize> {
        0..self.cutoff_pair.min(num_pairs)
    }
}

pub fn group_split(table: &FrequencyTable, cutoff_pair: usize) -> Result<GroupSplit> {
    if cutoff_pair > table.num_pairs() {
        return Err(invalid(format!(
            "cutoff pair {cutoff_pair} outside [0, {}]",
            table.num_pairs()
        )));
    }
    Ok(GroupSplit { cutoff_pair })
}

/// Per-token positions for both pair groups plus rotation magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionPlan {
    interp_positions: Vec<f64>,
    extrap_positions: Vec<f64>,
    ramp_weights: Option<Vec<f64>>,
    magnitudes: Vec<f64>,
    group_split: GroupSplit,
}

/// Angles of every pair of one token, and the token's magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveRotation {
    pub angles: Vec<f64>,
    pub magnitude: f64,
}

impl PositionPlan {
    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }

    pub fn interp_positions(&self) -> &[f64] {
        &self.interp_positions
    }

    pub fn extrap_positions(&self) -> &[f64] {
        &self.extrap_positions
    }

    pub fn ramp_weights(&self) -> Option<&[f64]> {
        self.ramp_weights.as_deref()
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn group_split(&self) -> GroupSplit {
        self.group_split
    }

    /// Position seen by `pair` at `token`.
    pub fn position(&self, token: usize, pair: usize) -> f64 {
        let interp = self.interp_positions[token];
        let extrap = self.extrap_positions[token];
        match &self.ramp_weights {
            Some(w) => mix(extrap, interp, w[pair]),
            None if self.group_split.is_interpolated(pair) => interp,
            None => extrap,
        }
    }

    fn check_table(&self, table: &FrequencyTable) -> Result<()> {
        if self.group_split.cutoff_pair > table.num_pairs() {
            return Err(invalid(format!(
                "plan cutoff {} exceeds {} pairs",
                self.group_split.cutoff_pair,
                table.num_pairs()
            )));
        }
        if let Some(w) = &self.ramp_weights {
            if w.len() != table.num_pairs() {
                return Err(invalid(format!(
                    "plan has {} ramp weights for {} pairs",
                    w.len(),
                    table.num_pairs()
                )));
            }
        }
        Ok(())
    }

    pub fn effective_angles(&self, table: &FrequencyTable, token: usize) -> Result<EffectiveRotation> {
        self.check_table(table)?;
        if token >= self.len() {
            return Err(invalid(format!(
                "token {token} out of range for plan of length {}",
                self.len()
            )));
        }
        let angles = table
            .freqs()
            .iter()
            .enumerate()
            .map(|(i, f)| f * self.position(token, i))
            .collect();
        Ok(EffectiveRotation {
            angles,
            magnitude: self.magnitudes[token],
        })
    }

    /// Precomputes `(sin, cos)` for every token and pair.
    pub fn rotary_cache(&self, table: &FrequencyTable) -> Result<RotaryCache> {
        self.check_table(table)?;
        let pairs = table.num_pairs();
        let mut trig = Vec::with_capacity(self.len() * pairs);
        for j in 0..self.len() {
            for (i, f) in table.freqs().iter().enumerate() {
                trig.push((f * self.position(j, i)).sin_cos());
            }
        }
        Ok(RotaryCache {
            pairs,
            trig,
            magnitudes: self.magnitudes.clone(),
        })
    }

    /// Appends `count` generated text tokens with unit steps after the last
    /// position of each group. Plans are built once per prompt; decoding only
    /// extends them.
    pub fn push_text_tokens(&mut self, count: usize) {
        for _ in 0..count {
            let next_i = self.interp_positions.last().map_or(0.0, |p| p + 1.0);
            let next_e = self.extrap_positions.last().map_or(0.0, |p| p + 1.0);
            self.interp_positions.push(next_i);
            self.extrap_positions.push(next_e);
            self.magnitudes.push(1.0);
        }
    }
}

fn mix(extrap: f64, interp: f64, weight: f64) -> f64 {
    if weight >= 1.0 {
        interp
    } else if weight <= 0.0 {
        extrap
    } else {
        extrap + weight * (interp - extrap)
    }
}

/// Plan materialised against a frequency table, ready for the kernels.
#[derive(Debug, Clone)]
pub struct RotaryCache {
    pairs: usize,
    trig: Vec<(f64, f64)>,
    magnitudes: Vec<f64>,
}

impl RotaryCache {
    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }

    pub fn trig(&self, token: usize) -> &[(f64, f64)] {
        &self.trig[token * self.pairs..(token + 1) * self.pairs]
    }

    pub fn magnitude(&self, token: usize) -> f64 {
        self.magnitudes[token]
    }
}

/// `num_tokens` evenly spaced positions from `p` to `p + window_len - 1`
/// inclusive. Equal lengths reproduce the integers exactly.
pub fn stretch_window(p: usize, window_len: usize, num_tokens: usize) -> Vec<f64> {
    let span = window_len.saturating_sub(1);
    match num_tokens {
        0 => Vec::new(),
        1 => vec![p as f64],
        n => (0..n)
            .map(|j| p as f64 + (span * j) as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn integer_positions(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64).collect()
}

pub fn plan_vanilla(total_tokens: usize) -> PositionPlan {
    PositionPlan {
        interp_positions: integer_positions(total_tokens),
        extrap_positions: integer_positions(total_tokens),
        ramp_weights: None,
        magnitudes: vec![1.0; total_tokens],
        group_split: GroupSplit { cutoff_pair: 0 },
    }
}

/// Every token at `j / s` in both groups, i.e. frequencies divided by `s`.
pub fn plan_whole_pi(cfg: &ExtensionConfig, total_tokens: usize) -> Result<PositionPlan> {
    expect_method(cfg, &[Method::WholePi])?;
    let s = cfg.extension_factor();
    let positions: Vec<f64> = (0..total_tokens).map(|j| j as f64 / s).collect();
    Ok(PositionPlan {
        interp_positions: positions.clone(),
        extrap_positions: positions,
        ramp_weights: None,
        magnitudes: vec![1.0; total_tokens],
        group_split: GroupSplit { cutoff_pair: 0 },
    })
}

/// Whole-context YaRN: ramped per-pair mixing of `j / s` and `j`, and a
/// uniform magnitude `√(logit_scale(s))` so that every logit scales by
/// `logit_scale(s)`.
///
/// The ramp is evaluated against the pre-extension context `total_tokens / s`.
pub fn plan_whole_yarn(
    cfg: &ExtensionConfig,
    params: &YarnParams,
    table: &FrequencyTable,
    total_tokens: usize,
) -> Result<PositionPlan> {
    expect_method(cfg, &[Method::WholeYarn])?;
    let s = cfg.extension_factor();
    let original_context = total_tokens as f64 / s;
    let magnitude = YarnParams::logit_scale(s).sqrt();
    Ok(PositionPlan {
        interp_positions: (0..total_tokens).map(|j| j as f64 / s).collect(),
        extrap_positions: integer_positions(total_tokens),
        ramp_weights: Some(params.ramp_weights(table, original_context)),
        magnitudes: vec![magnitude; total_tokens],
        group_split: GroupSplit { cutoff_pair: 0 },
    })
}

/// Audio-only extension: the audio run is squeezed into the anchor window in
/// the interpolated group, text keeps unit steps, and audio tokens carry a
/// `1/√t` magnitude.
pub fn plan_partial(
    cfg: &ExtensionConfig,
    layout: &SequenceLayout,
    table: &FrequencyTable,
) -> Result<PositionPlan> {
    expect_method(
        cfg,
        &[Method::PartialPi, Method::PartialYarn2, Method::PartialYarn3],
    )?;
    let window = layout.audio_window()?;
    if window.len != cfg.target_audio_tokens {
        return Err(invalid(format!(
            "layout has {} audio tokens but the config targets {}",
            window.len, cfg.target_audio_tokens
        )));
    }
    let ramp = match cfg.method {
        Method::PartialYarn3 => Some(
            YarnParams::default().ramp_weights(table, cfg.anchor_audio_tokens as f64),
        ),
        _ => None,
    };
    let cutoff = if ramp.is_some() { 0 } else { cfg.cutoff_pair };
    partial_layout(
        window,
        layout.total_tokens(),
        cfg.anchor_audio_tokens,
        group_split(table, cutoff)?,
        cfg.temperature,
        ramp,
    )
}

/// Virtual-length training window: the audio run is spread over
/// `virtual_window_tokens` positions, stretching or compressing it.
pub fn plan_vlat(
    layout: &SequenceLayout,
    virtual_window_tokens: usize,
    cutoff_pair: usize,
    temperature: f64,
    table: &FrequencyTable,
) -> Result<PositionPlan> {
    if virtual_window_tokens == 0 {
        return Err(invalid("virtual window must hold at least one token"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let window = layout.audio_window()?;
    partial_layout(
        window,
        layout.total_tokens(),
        virtual_window_tokens,
        group_split(table, cutoff_pair)?,
        temperature,
        None,
    )
}

fn partial_layout(
    window: AudioWindow,
    total_tokens: usize,
    anchor: usize,
    split: GroupSplit,
    temperature: f64,
    ramp_weights: Option<Vec<f64>>,
) -> Result<PositionPlan> {
    let p = window.start;
    let suffix = total_tokens - window.end();
    let mut interp = Vec::with_capacity(total_tokens);
    interp.extend((0..p).map(|j| j as f64));
    interp.extend(stretch_window(p, anchor, window.len));
    interp.extend((0..suffix).map(|j| (p + anchor + j) as f64));

    let audio_mag = 1.0 / temperature.sqrt();
    let magnitudes = (0..total_tokens)
        .map(|j| if window.contains(j) { audio_mag } else { 1.0 })
        .collect();
    Ok(PositionPlan {
        interp_positions: interp,
        extrap_positions: integer_positions(total_tokens),
        ramp_weights,
        magnitudes,
        group_split: split,
    })
}

fn expect_method(cfg: &ExtensionConfig, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&cfg.method) {
        Ok(())
    } else {
        Err(invalid(format!(
            "method {} not accepted here (expected one of {:?})",
            cfg.method, allowed
        )))
    }
}

/// Builds the plan for any method. `layout` must contain exactly one audio
/// run whose length is `cfg.target_audio_tokens` for the partial methods.
pub fn build_plan(
    cfg: &ExtensionConfig,
    layout: &SequenceLayout,
    table: &FrequencyTable,
    yarn: &YarnParams,
) -> Result<PositionPlan> {
    let total = layout.total_tokens();
    match cfg.method {
        Method::Vanilla => Ok(plan_vanilla(total)),
        Method::WholePi => plan_whole_pi(cfg, total),
        Method::WholeYarn => plan_whole_yarn(cfg, yarn, table, total),
        Method::PartialPi | Method::PartialYarn2 | Method::PartialYarn3 => {
            plan_partial(cfg, layout, table)
        }
    }
}
