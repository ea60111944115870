//! Feature mixture over concatenated token sequences.
//!
//! For a combination of query modalities the projected token sequences of
//! its members are concatenated along the token axis in canonical order and
//! passed through layer norm, self-attention with a residual, one pre-norm
//! transformer block and an MLP whose last stage averages over tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn;
use crate::params::{ParamStore, Session};
use crate::tensor::{Axis, Tensor, Var};

/// Nonempty set of query modalities, kept in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModalityCombo(Vec<Modality>);

impl ModalityCombo {
    pub fn new(members: &[Modality]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("empty modality combination".into()));
        }
        let mut sorted = members.to_vec();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Invalid(format!("modality {} listed twice", w[0])));
            }
        }
        if let Some(m) = sorted.iter().find(|m| !Modality::QUERY.contains(m)) {
            return Err(Error::Invalid(format!("{m} is not a query modality")));
        }
        Ok(Self(sorted))
    }

    pub fn members(&self) -> &[Modality] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0.contains(&m)
    }

    /// Compact key such as `ICT`.
    pub fn key(&self) -> String {
        self.0.iter().map(|m| m.code()).collect()
    }
}

impl Ord for ModalityCombo {
    /// Size first, then lexicographic in canonical modality order.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for ModalityCombo {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ModalityCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|m| m.code().to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for ModalityCombo {
    type Err = Error;

    /// Accepts `T+I`, `I,T` or `IT`, in any member order.
    fn from_str(s: &str) -> Result<Self> {
        let mut members = Vec::new();
        for c in s.chars().filter(|c| !matches!(c, '+' | ',' | ' ')) {
            members.push(Modality::from_code(c).ok_or_else(|| Error::Invalid(format!("unknown modality code {c:?} in {s:?}")))?);
        }
        Self::new(&members)
    }
}

/// The 15 nonempty subsets of the query modalities, size first, then
/// lexicographic.
pub fn enumerate_combos() -> Vec<ModalityCombo> {
    let q = Modality::QUERY;
    let mut out: Vec<ModalityCombo> = (1u32..1 << q.len())
        .map(|mask| {
            let members: Vec<Modality> = (0..q.len()).filter(|i| mask & (1 << i) != 0).map(|i| q[i]).collect();
            ModalityCombo(members)
        })
        .collect();
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub hidden: usize,
    pub heads: usize,
    /// Hidden expansion of the transformer block's MLP.
    pub mlp_ratio: usize,
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "mixture hidden {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mixture mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Projected token sequences of one modality for a batch of samples.
#[derive(Debug, Clone)]
pub struct MemberSequences {
    pub sequence: Var,
    pub lengths: Vec<usize>,
}

/// A fused vector for one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub combo: ModalityCombo,
    pub vector: Tensor,
}

#[derive(Debug, Clone)]
pub struct FeatureMixture {
    pub cfg: MixtureConfig,
    /// Width `D` of incoming tokens and of the fused vector.
    pub dim: usize,
}

impl FeatureMixture {
    pub fn new(cfg: MixtureConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::Config("mixture input width must be positive".into()));
        }
        Ok(Self { cfg, dim })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let (d, h) = (self.dim, self.cfg.hidden);
        nn::init_layer_norm(store, "fm.ln_in", d);
        nn::init_linear(store, seed, "fm.lift", d, h, nn::fan_in_std(d));
        nn::init_linear(store, seed, "fm.attn.qkv", h, 3 * h, nn::fan_in_std(h));
        nn::init_linear(store, seed, "fm.attn.out", h, h, nn::fan_in_std(h));
        nn::init_layer_norm(store, "fm.block.ln1", h);
        nn::init_linear(store, seed, "fm.block.attn.qkv", h, 3 * h, nn::fan_in_std(h));
        nn::init_linear(store, seed, "fm.block.attn.out", h, h, nn::fan_in_std(h));
        nn::init_layer_norm(store, "fm.block.ln2", h);
        nn::init_linear(store, seed, "fm.block.mlp.up", h, self.cfg.mlp_ratio * h, nn::fan_in_std(h));
        nn::init_linear(store, seed, "fm.block.mlp.down", self.cfg.mlp_ratio * h, h, nn::fan_in_std(self.cfg.mlp_ratio * h));
        nn::init_linear(store, seed, "fm.mlp.fc1", h, h, nn::fan_in_std(h));
        nn::init_linear(store, seed, "fm.mlp.fc2", h, d, nn::fan_in_std(h));
    }

    fn self_attention(&self, s: &mut Session, prefix: &str, x: Var, lengths: &[usize]) -> Result<Var> {
        let qkv = nn::linear(s, &format!("{prefix}.qkv"), x)?;
        let (q, k, v) = nn::split_qkv(s, qkv)?;
        let a = nn::attention(s, q, k, v, lengths, self.cfg.heads)?;
        nn::linear(s, &format!("{prefix}.out"), a)
    }

    /// Mixes already concatenated sequences (`Σ lengths × D`) into one
    /// `D`-vector per segment.
    pub fn forward(&self, s: &mut Session, x: Var, lengths: &[usize]) -> Result<Var> {
        let width = s.graph.value(x).cols();
        if width != self.dim {
            return Err(Error::Invalid(format!("mixture expects width {}, got {width}", self.dim)));
        }
        let x = nn::layer_norm(s, "fm.ln_in", x)?;
        let x = nn::linear(s, "fm.lift", x)?;
        let a = self.self_attention(s, "fm.attn", x, lengths)?;
        let x = s.graph.add(x, a)?;

        let h = nn::layer_norm(s, "fm.block.ln1", x)?;
        let a = self.self_attention(s, "fm.block.attn", h, lengths)?;
        let x = s.graph.add(x, a)?;
        let h = nn::layer_norm(s, "fm.block.ln2", x)?;
        let h = nn::linear(s, "fm.block.mlp.up", h)?;
        let h = s.graph.gelu(h)?;
        let h = nn::linear(s, "fm.block.mlp.down", h)?;
        let x = s.graph.add(x, h)?;

        let h = nn::linear(s, "fm.mlp.fc1", x)?;
        let h = s.graph.gelu(h)?;
        let h = nn::linear(s, "fm.mlp.fc2", h)?;
        Ok(s.graph.segment_mean(h, lengths)?)
    }

    /// Fuses `combo` for every sample of a batch. All member sequence sets
    /// must hold the same number of samples.
    pub fn fuse(&self, s: &mut Session, members: &BTreeMap<Modality, MemberSequences>, combo: &ModalityCombo) -> Result<Var> {
        let (stacked, offsets) = stack_members(s, members)?;
        self.fuse_stacked(s, stacked, &offsets, members, combo)
    }

    /// Fuses every combination, sharing one concatenation of the inputs.
    pub fn fuse_all(&self, s: &mut Session, members: &BTreeMap<Modality, MemberSequences>) -> Result<BTreeMap<ModalityCombo, Var>> {
        let (stacked, offsets) = stack_members(s, members)?;
        let mut out = BTreeMap::new();
        for combo in enumerate_combos() {
            let v = self
                .fuse_stacked(s, stacked, &offsets, members, &combo)
                .map_err(|e| Error::Invalid(format!("combination {combo}: {e}")))?;
            out.insert(combo, v);
        }
        Ok(out)
    }

    fn fuse_stacked(
        &self,
        s: &mut Session,
        stacked: Var,
        offsets: &BTreeMap<Modality, Vec<usize>>,
        members: &BTreeMap<Modality, MemberSequences>,
        combo: &ModalityCombo,
    ) -> Result<Var> {
        for &m in combo.members() {
            if !members.contains_key(&m) {
                return Err(Error::Invalid(format!("combination {combo} needs {m} sequences")));
            }
        }
        let batch = members[&combo.members()[0]].lengths.len();
        let mut rows = Vec::new();
        let mut lengths = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut len = 0;
            for m in combo.members() {
                let seq = &members[m];
                let start = offsets[m][b];
                rows.extend(start..start + seq.lengths[b]);
                len += seq.lengths[b];
            }
            lengths.push(len);
        }
        let x = s.graph.gather_rows(stacked, &rows)?;
        self.forward(s, x, &lengths)
    }
}

/// Concatenates all member sequences once and records where each sample's
/// rows start.
fn stack_members(s: &mut Session, members: &BTreeMap<Modality, MemberSequences>) -> Result<(Var, BTreeMap<Modality, Vec<usize>>)> {
    let Some(batch) = members.values().next().map(|m| m.lengths.len()) else {
        return Err(Error::Invalid("no member sequences".into()));
    };
    let mut parts = Vec::with_capacity(members.len());
    let mut offsets = BTreeMap::new();
    let mut offset = 0;
    let mut dim = None;
    for (&m, seq) in members {
        if seq.lengths.len() != batch {
            return Err(Error::Invalid(format!(
                "{m} has {} samples, expected {batch}",
                seq.lengths.len()
            )));
        }
        let t = s.graph.value(seq.sequence);
        if t.rows() != seq.lengths.iter().sum::<usize>() {
            return Err(Error::Invalid(format!("{m} sequence rows do not match its lengths")));
        }
        match dim {
            None => dim = Some(t.cols()),
            Some(d) if d != t.cols() => {
                return Err(Error::Invalid(format!("{m} sequences have width {}, expected {d}", t.cols())));
            }
            _ => {}
        }
        let mut starts = Vec::with_capacity(batch);
        for &len in &seq.lengths {
            starts.push(offset);
            offset += len;
        }
        offsets.insert(m, starts);
        parts.push(seq.sequence);
    }
    let stacked = if parts.len() == 1 { parts[0] } else { s.graph.concat(&parts, Axis::Rows)? };
    Ok((stacked, offsets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_combos_in_order() {
        let all = enumerate_combos();
        assert_eq!(all.len(), 15);
        let keys: Vec<String> = all.iter().map(|c| c.key()).collect();
        assert_eq!(
            keys,
            ["I", "C", "S", "T", "IC", "IS", "IT", "CS", "CT", "ST", "ICS", "ICT", "IST", "CST", "ICST"]
        );
    }

    #[test]
    fn parsing_canonicalizes() {
        let a: ModalityCombo = "T+I".parse().unwrap();
        assert_eq!(a, ModalityCombo::new(&[Modality::Infrared, Modality::Text]).unwrap());
        assert_eq!(a.to_string(), "I+T");
        assert!("R+T".parse::<ModalityCombo>().is_err());
        assert!("I+I".parse::<ModalityCombo>().is_err());
        assert!("".parse::<ModalityCombo>().is_err());
    }

    #[test]
    fn hidden_must_split_into_heads() {
        assert!(MixtureConfig { hidden: 30, heads: 4, mlp_ratio: 4 }.validate().is_err());
        assert!(MixtureConfig { hidden: 32, heads: 4, mlp_ratio: 4 }.validate().is_ok());
    }
}
