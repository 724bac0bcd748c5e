use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The ten scoring methods. Multi-generation kinds carry their sample count K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScorerKind {
    PTrue,
    PTrueVerbalized,
    PInputContradict,
    PSelfContradict,
    PFactContradict,
    InversePerplexity,
    NliDirect,
    SelfCheckNli(u32),
    SimilarityDegree(u32),
    HallucinationRail(u32),
}

impl ScorerKind {
    /// Number of sampled generations the scorer consumes (0 for single-generation kinds).
    pub fn generations(self) -> u32 {
        match self {
            Self::SelfCheckNli(k) | Self::SimilarityDegree(k) | Self::HallucinationRail(k) => k,
            _ => 0,
        }
    }

    pub fn is_multi_generation(self) -> bool {
        self.generations() > 0
    }

    /// Logit-based P(True)-style kinds that read a binary verdict from the first token.
    pub fn is_prompted_binary(self) -> bool {
        matches!(
            self,
            Self::PTrue | Self::PInputContradict | Self::PSelfContradict | Self::PFactContradict
        )
    }

    /// LLM calls per example: one per generation, plus one judge call for the rail.
    pub fn llm_calls(self) -> u32 {
        match self {
            Self::NliDirect => 0,
            Self::SelfCheckNli(k) | Self::SimilarityDegree(k) => k,
            Self::HallucinationRail(k) => k + 1,
            _ => 1,
        }
    }

    /// NLI classifier queries per example.
    pub fn nli_calls(self) -> u32 {
        match self {
            Self::NliDirect => 1,
            Self::SelfCheckNli(k) => k,
            Self::SimilarityDegree(k) => 2 * k,
            _ => 0,
        }
    }

    pub fn validate(self) -> Result<Self, String> {
        let multi = matches!(
            self,
            Self::SelfCheckNli(_) | Self::SimilarityDegree(_) | Self::HallucinationRail(_)
        );
        if multi && self.generations() < 2 {
            return Err(format!("{self}: K must be at least 2"));
        }
        Ok(self)
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PTrue => f.write_str("PTrue"),
            Self::PTrueVerbalized => f.write_str("PTrueVerbalized"),
            Self::PInputContradict => f.write_str("PInputContradict"),
            Self::PSelfContradict => f.write_str("PSelfContradict"),
            Self::PFactContradict => f.write_str("PFactContradict"),
            Self::InversePerplexity => f.write_str("InversePerplexity"),
            Self::NliDirect => f.write_str("NliDirect"),
            Self::SelfCheckNli(k) => write!(f, "SelfCheckNli({k})"),
            Self::SimilarityDegree(k) => write!(f, "SimilarityDegree({k})"),
            Self::HallucinationRail(k) => write!(f, "HallucinationRail({k})"),
        }
    }
}

impl FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let kind = match s {
            "PTrue" => Self::PTrue,
            "PTrueVerbalized" => Self::PTrueVerbalized,
            "PInputContradict" => Self::PInputContradict,
            "PSelfContradict" => Self::PSelfContradict,
            "PFactContradict" => Self::PFactContradict,
            "InversePerplexity" => Self::InversePerplexity,
            "NliDirect" => Self::NliDirect,
            _ => {
                let (name, rest) = s
                    .split_once('(')
                    .ok_or_else(|| format!("unknown scorer {s:?}"))?;
                let k: u32 = rest
                    .strip_suffix(')')
                    .and_then(|k| k.trim().parse().ok())
                    .ok_or_else(|| format!("scorer {s:?}: expected {name}(K)"))?;
                match name {
                    "SelfCheckNli" => Self::SelfCheckNli(k),
                    "SimilarityDegree" => Self::SimilarityDegree(k),
                    "HallucinationRail" => Self::HallucinationRail(k),
                    _ => return Err(format!("unknown scorer {s:?}")),
                }
            }
        };
        kind.validate()
    }
}

impl TryFrom<String> for ScorerKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ScorerKind> for String {
    fn from(k: ScorerKind) -> Self {
        k.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in [
            ScorerKind::PTrue,
            ScorerKind::PTrueVerbalized,
            ScorerKind::PInputContradict,
            ScorerKind::PSelfContradict,
            ScorerKind::PFactContradict,
            ScorerKind::InversePerplexity,
            ScorerKind::NliDirect,
            ScorerKind::SelfCheckNli(10),
            ScorerKind::SimilarityDegree(3),
            ScorerKind::HallucinationRail(2),
        ] {
            assert_eq!(k.to_string().parse::<ScorerKind>().unwrap(), k);
        }
    }

    #[test]
    fn multi_generation_needs_two_samples() {
        assert!("SelfCheckNli(1)".parse::<ScorerKind>().is_err());
        assert!("Bogus".parse::<ScorerKind>().is_err());
        assert!("SimilarityDegree(x)".parse::<ScorerKind>().is_err());
    }
}
