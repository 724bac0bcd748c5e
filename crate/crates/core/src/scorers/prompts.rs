//! Prompt templates, stored as text assets under `prompts/`.

use super::ScorerKind;

pub const INPUT: &str = "{x}";
pub const RESPONSE: &str = "{z}";
pub const SAMPLES: &str = "{K additional_sampled_responses}";
pub const CANDIDATE: &str = "{candidate_response}";

const P_TRUE: &str = include_str!("../../prompts/p_true.txt");
const P_INPUT_CONTRADICT: &str = include_str!("../../prompts/p_input_contradict.txt");
const P_SELF_CONTRADICT: &str = include_str!("../../prompts/p_self_contradict.txt");
const P_FACT_CONTRADICT: &str = include_str!("../../prompts/p_fact_contradict.txt");
const VERBALIZED: &str = include_str!("../../prompts/verbalized.txt");
const HALLUCINATION_RAIL: &str = include_str!("../../prompts/hallucination_rail.txt");

/// Version tag of the template asset set; bump when any asset changes.
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: ScorerKind,
    pub body: &'static str,
}

impl PromptTemplate {
    /// Template for a prompted kind; `None` for kinds that send no prompt of their own.
    pub fn for_kind(kind: ScorerKind) -> Option<Self> {
        let body = match kind {
            ScorerKind::PTrue => P_TRUE,
            ScorerKind::PInputContradict => P_INPUT_CONTRADICT,
            ScorerKind::PSelfContradict => P_SELF_CONTRADICT,
            ScorerKind::PFactContradict => P_FACT_CONTRADICT,
            ScorerKind::PTrueVerbalized => VERBALIZED,
            ScorerKind::HallucinationRail(_) => HALLUCINATION_RAIL,
            _ => return None,
        };
        Some(Self { kind, body })
    }

    /// Substitutes placeholders in one left-to-right pass, so placeholder-like
    /// text inside the substituted values is never expanded.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body;
        'scan: while let Some(open) = rest.find('{') {
            for (name, value) in values {
                if rest[open..].starts_with(name) {
                    out.push_str(&rest[..open]);
                    out.push_str(value);
                    rest = &rest[open + name.len()..];
                    continue 'scan;
                }
            }
            out.push_str(&rest[..=open]);
            rest = &rest[open + 1..];
        }
        out.push_str(rest);
        out
    }
}
