//! Transformer towers whose linear layers carry per-modality low-rank experts.
//!
//! A routed linear computes `y = x·W + b + c·(x·B)·A` where `B: d×r` starts
//! at zero, `A: r×k` starts random, and `c` is the control signal of the
//! batch. Only the expert of the active modality is ever evaluated, so the
//! other experts neither influence the output nor receive gradient.

use crate::assembler::{ControlSignal, TokenBatch};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn;
use crate::params::{ParamStore, Session, INIT_STD};
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rank: usize,
    pub expert_modalities: Vec<Modality>,
    pub projection_dim: usize,
    /// One `d→3d` attention input projection instead of three `d→d` ones.
    pub fused_qkv: bool,
}

impl EncoderConfig {
    /// The ViT-B/16 image tower of CLIP with four visual experts.
    pub fn clip_b16(rank: usize) -> Self {
        Self {
            layers: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            rank,
            expert_modalities: Modality::VISUAL.to_vec(),
            projection_dim: 512,
            fused_qkv: true,
        }
    }

    /// `(suffix, d_in, d_out)` of every linear layer in one block.
    pub fn block_linears(&self) -> Vec<(&'static str, usize, usize)> {
        let d = self.width;
        let hidden = self.mlp_ratio * d;
        let mut out = if self.fused_qkv {
            vec![("attn.qkv", d, 3 * d)]
        } else {
            vec![("attn.q", d, d), ("attn.k", d, d), ("attn.v", d, d)]
        };
        out.extend([("attn.out", d, d), ("mlp.up", d, hidden), ("mlp.down", hidden, d)]);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.projection_dim == 0 {
            return Err(Error::Config("mlp_ratio and projection_dim must be positive".into()));
        }
        if !self.expert_modalities.is_empty() {
            for (name, d, k) in self.block_linears() {
                if 2 * self.rank > d.min(k) {
                    return Err(Error::Config(format!(
                        "rank {} too large for {name} ({d}x{k}); need r <= min(d,k)/2",
                        self.rank
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Extra parameters of the experts: `n_experts · layers · r · Σ (d_i + k_i)`
/// over the linear layers of one block.
pub fn count_expert_params(cfg: &EncoderConfig, n_experts: usize) -> u64 {
    let per_block: usize = cfg.block_linears().iter().map(|(_, d, k)| d + k).sum();
    (n_experts * cfg.layers * cfg.rank * per_block) as u64
}

/// Extra floating-point operations (2 per multiply-accumulate) of the active
/// expert paths in one forward pass over `tokens` tokens.
pub fn count_expert_flops(cfg: &EncoderConfig, tokens: usize) -> u64 {
    let per_block: usize = cfg.block_linears().iter().map(|(_, d, k)| d + k).sum();
    (2 * tokens * cfg.layers * cfg.rank * per_block) as u64
}

/// Linear layer with optional per-modality low-rank experts. Parameters live
/// in the store under `{name}.w`, `{name}.b`, `{name}.expert.{M}.down` (`B`)
/// and `{name}.expert.{M}.up` (`A`).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedLinear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub experts: Vec<Modality>,
    /// Standard deviation of the base weight at initialization.
    pub init_std: f64,
}

impl RoutedLinear {
    pub fn expert_names(&self, m: Modality) -> (String, String) {
        (
            format!("{}.expert.{}.down", self.name, m.code()),
            format!("{}.expert.{}.up", self.name, m.code()),
        )
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        nn::init_linear(store, seed, &self.name, self.d_in, self.d_out, self.init_std);
        for &m in &self.experts {
            let (down, up) = self.expert_names(m);
            store.init_const(&down, &[self.d_in, self.rank], 0.0);
            store.init_normal(seed, &up, &[self.rank, self.d_out], INIT_STD);
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, c: ControlSignal) -> Result<Var> {
        let base = nn::linear(s, &self.name, x)?;
        if !c.active {
            return Ok(base);
        }
        if !self.experts.contains(&c.modality) {
            return Err(Error::Invalid(format!(
                "{}: no expert for active modality {}",
                self.name, c.modality
            )));
        }
        let (down, up) = self.expert_names(c.modality);
        let down = s.param(&down)?;
        let up = s.param(&up)?;
        let h = s.graph.matmul(x, down)?;
        let delta = s.graph.matmul(h, up)?;
        Ok(s.graph.add(base, delta)?)
    }
}

/// Output of a tower: projected token sequence plus one pooled row per sample.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub sequence: Var,
    pub pooled: Var,
    pub lengths: Vec<usize>,
}

/// Pre-norm transformer stack followed by a final norm and a linear
/// projection to the shared space.
#[derive(Debug, Clone)]
pub struct Tower {
    pub name: String,
    pub cfg: EncoderConfig,
    /// Pool from the last token of each sample instead of the first.
    pub pool_last: bool,
}

impl Tower {
    pub fn new(name: &str, cfg: EncoderConfig, pool_last: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            name: name.to_string(),
            cfg,
            pool_last,
        })
    }

    pub fn linear(&self, layer: usize, suffix: &str) -> RoutedLinear {
        let (_, d_in, d_out) = self
            .cfg
            .block_linears()
            .into_iter()
            .find(|(n, _, _)| *n == suffix)
            .expect("known linear suffix");
        // Width-scaled initialization of CLIP; projections that write into
        // the residual stream are further shrunk by the depth.
        let d = self.cfg.width as f64;
        let residual = (2.0 * self.cfg.layers as f64).powf(-0.5);
        let init_std = match suffix {
            "attn.out" | "mlp.down" => d.powf(-0.5) * residual,
            "mlp.up" => (2.0 * d).powf(-0.5),
            _ => d.powf(-0.5),
        };
        RoutedLinear {
            name: format!("{}.blocks.{layer}.{suffix}", self.name),
            d_in,
            d_out,
            rank: self.cfg.rank,
            experts: self.cfg.expert_modalities.clone(),
            init_std,
        }
    }

    pub fn linears(&self, layer: usize) -> Vec<RoutedLinear> {
        self.cfg
            .block_linears()
            .iter()
            .map(|(n, _, _)| self.linear(layer, n))
            .collect()
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let d = self.cfg.width;
        for l in 0..self.cfg.layers {
            nn::init_layer_norm(store, &format!("{}.blocks.{l}.ln1", self.name), d);
            nn::init_layer_norm(store, &format!("{}.blocks.{l}.ln2", self.name), d);
            for lin in self.linears(l) {
                lin.init_params(store, seed);
            }
        }
        nn::init_layer_norm(store, &format!("{}.ln_post", self.name), d);
        store.init_normal(
            seed,
            &format!("{}.proj", self.name),
            &[d, self.cfg.projection_dim],
            (d as f64).powf(-0.5),
        );
    }

    fn block(&self, s: &mut Session, l: usize, x: Var, lengths: &[usize], c: ControlSignal) -> Result<Var> {
        let h = nn::layer_norm(s, &format!("{}.blocks.{l}.ln1", self.name), x)?;
        let (q, k, v) = if self.cfg.fused_qkv {
            let qkv = self.linear(l, "attn.qkv").forward(s, h, c)?;
            nn::split_qkv(s, qkv)?
        } else {
            (
                self.linear(l, "attn.q").forward(s, h, c)?,
                self.linear(l, "attn.k").forward(s, h, c)?,
                self.linear(l, "attn.v").forward(s, h, c)?,
            )
        };
        let a = nn::attention(s, q, k, v, lengths, self.cfg.heads)?;
        let a = self.linear(l, "attn.out").forward(s, a, c)?;
        let x = s.graph.add(x, a)?;
        let h = nn::layer_norm(s, &format!("{}.blocks.{l}.ln2", self.name), x)?;
        let h = self.linear(l, "mlp.up").forward(s, h, c)?;
        let h = s.graph.gelu(h)?;
        let h = self.linear(l, "mlp.down").forward(s, h, c)?;
        Ok(s.graph.add(x, h)?)
    }

    /// Runs the stack under control signal `c`.
    pub fn forward(&self, s: &mut Session, tokens: &TokenBatch, c: ControlSignal) -> Result<Encoded> {
        let width = s.graph.value(tokens.embeddings).cols();
        if width != self.cfg.width {
            return Err(Error::Invalid(format!(
                "{}: token width {width} does not match encoder width {}",
                self.name, self.cfg.width
            )));
        }
        let mut x = tokens.embeddings;
        for l in 0..self.cfg.layers {
            x = self.block(s, l, x, &tokens.lengths, c)?;
        }
        let x = nn::layer_norm(s, &format!("{}.ln_post", self.name), x)?;
        let proj = s.param(&format!("{}.proj", self.name))?;
        let sequence = s.graph.matmul(x, proj)?;
        let heads = nn::segment_heads(&tokens.lengths, self.pool_last);
        let pooled = s.graph.gather_rows(sequence, &heads)?;
        Ok(Encoded {
            sequence,
            pooled,
            lengths: tokens.lengths.clone(),
        })
    }
}

/// Routed visual tower plus an independent text tower, both projecting to
/// the same `D`.
#[derive(Debug, Clone)]
pub struct TowerSet {
    pub visual: Tower,
    pub text: Tower,
    /// When false every control signal is forced off (no expert routing).
    pub routing: bool,
}

impl TowerSet {
    pub fn new(visual: EncoderConfig, text: EncoderConfig, routing: bool) -> Result<Self> {
        if visual.projection_dim != text.projection_dim {
            return Err(Error::Config(format!(
                "visual projection {} differs from text projection {}",
                visual.projection_dim, text.projection_dim
            )));
        }
        if visual.expert_modalities.contains(&Modality::Text) || !text.expert_modalities.is_empty() {
            return Err(Error::Config("text tokens use the separate text tower, which has no experts".into()));
        }
        Ok(Self {
            visual: Tower::new("visual", visual, false)?,
            text: Tower::new("text", text, true)?,
            routing,
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        self.visual.init_params(store, seed);
        self.text.init_params(store, seed);
    }

    pub fn projection_dim(&self) -> usize {
        self.visual.cfg.projection_dim
    }

    /// Encodes one single-modality token batch. Pooled rows are the class
    /// token for images and the end-flag token for text.
    pub fn encode(&self, s: &mut Session, tokens: &TokenBatch) -> Result<Encoded> {
        let m = tokens.control.modality;
        if m.is_visual() {
            let c = if self.routing { tokens.control } else { ControlSignal::off(m) };
            self.visual.forward(s, tokens, c)
        } else {
            self.text.forward(s, tokens, ControlSignal::off(m))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_parameter_counts() {
        let expected = [(4, 2_359_296u64), (8, 4_718_592), (16, 9_437_184), (32, 18_874_368)];
        for (r, n) in expected {
            assert_eq!(count_expert_params(&EncoderConfig::clip_b16(r), 4), n);
        }
    }

    #[test]
    fn counts_are_linear_in_rank() {
        let mut cfg = EncoderConfig::clip_b16(3);
        cfg.fused_qkv = false;
        let one = count_expert_params(&cfg, 2);
        cfg.rank = 6;
        assert_eq!(count_expert_params(&cfg, 2), 2 * one);
        assert_eq!(count_expert_flops(&cfg, 50), 2 * count_expert_flops(&EncoderConfig { rank: 3, ..cfg.clone() }, 50));
        cfg.rank = 0;
        assert_eq!(count_expert_flops(&cfg, 193), 0);
    }

    #[test]
    fn desk_flops_match_hand_tally() {
        let cfg = EncoderConfig {
            layers: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            rank: 2,
            expert_modalities: Modality::VISUAL.to_vec(),
            projection_dim: 32,
            fused_qkv: true,
        };
        // Per token and block: qkv 64→192, out 64→64, up 64→256, down 256→64,
        // each costing r·(d+k) MACs through B then A.
        let macs_per_token_block = 2 * (64 + 192) + 2 * (64 + 64) + 2 * (64 + 256) + 2 * (256 + 64);
        assert_eq!(macs_per_token_block, 2048);
        let tally = 2 * 9 * 2 * macs_per_token_block as u64;
        assert_eq!(count_expert_flops(&cfg, 9), tally);
    }

    #[test]
    fn rank_bound_is_enforced() {
        let mut cfg = EncoderConfig::clip_b16(4);
        cfg.width = 8;
        cfg.heads = 2;
        cfg.rank = 5;
        assert!(cfg.validate().is_err());
        cfg.rank = 4;
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }
}
