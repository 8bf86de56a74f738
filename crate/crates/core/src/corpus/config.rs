use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Baseline,
    StackProtector,
    StackClash,
    Cfi,
    Safestack,
    Alignment,
    PatchableEntry,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Baseline => "baseline",
            Category::StackProtector => "stack_protector",
            Category::StackClash => "stack_clash",
            Category::Cfi => "cfi",
            Category::Safestack => "safestack",
            Category::Alignment => "alignment",
            Category::PatchableEntry => "patchable_entry",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatTier {
    /// Emitted by an unmodified toolchain under a legal configuration.
    Inadvertent,
    /// Requires post-compilation transformation of the binary.
    Adversarial,
}

/// `-fpatchable-function-entry=N,M`: `total_nops` NOPs, `before_entry` of them
/// placed ahead of the entry label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PadParams {
    pub total_nops: u32,
    pub before_entry: u32,
}

impl FromStr for PadParams {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::InvalidConfig(format!("bad patchable-entry parameters {s:?}"));
        let (n, m) = match s.split_once(',') {
            Some((n, m)) => (n.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?),
            None => (s.parse().map_err(|_| bad())?, 0),
        };
        if m > n {
            return Err(bad());
        }
        Ok(PadParams {
            total_nops: n,
            before_entry: m,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackConfiguration {
    pub name: String,
    pub flags: Vec<String>,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<PadParams>,
    /// Post-compilation code transformation (e.g. pad injection). Its
    /// presence is what makes a configuration adversarial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
}

const PATCHABLE_FLAG: &str = "-fpatchable-function-entry=";

impl AttackConfiguration {
    pub fn new(
        name: impl Into<String>,
        category: Category,
        flags: &[&str],
    ) -> Result<Self, CorpusError> {
        let flags: Vec<String> = flags.iter().map(|f| f.to_string()).collect();
        let pad = flags
            .iter()
            .find_map(|f| f.strip_prefix(PATCHABLE_FLAG))
            .map(str::parse)
            .transpose()?;
        let config = AttackConfiguration {
            name: name.into(),
            flags,
            category,
            pad,
            transform: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_transform(mut self, transform: impl Into<String>) -> Self {
        self.transform = Some(transform.into());
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.category == Category::PatchableEntry && self.pad.is_none() {
            return Err(CorpusError::InvalidConfig(format!(
                "{}: patchable_entry configuration without pad parameters",
                self.name
            )));
        }
        Ok(())
    }

    pub fn threat_tier(&self) -> ThreatTier {
        if self.transform.is_some() {
            ThreatTier::Adversarial
        } else {
            ThreatTier::Inadvertent
        }
    }
}

/// The configuration matrix exercised by the corpus builder.
pub fn builtin_configs() -> Vec<AttackConfiguration> {
    let c = |name: &str, cat, flags: &[&str]| AttackConfiguration::new(name, cat, flags).unwrap();
    vec![
        c("baseline", Category::Baseline, &[]),
        c("no_stack_protector", Category::Baseline, &["-fno-stack-protector"]),
        c("stack_protector", Category::StackProtector, &["-fstack-protector-strong"]),
        c("stack_protector_all", Category::StackProtector, &["-fstack-protector-all"]),
        c("stack_clash", Category::StackClash, &["-fstack-clash-protection"]),
        c("cet", Category::Cfi, &["-fcf-protection=full"]),
        c(
            "clang_cfi",
            Category::Cfi,
            &["-fsanitize=cfi", "-flto", "-fvisibility=hidden"],
        ),
        c("safestack", Category::Safestack, &["-fsanitize=safe-stack"]),
        c("align_none", Category::Alignment, &["-falign-functions=1"]),
        c("align_32", Category::Alignment, &["-falign-functions=32"]),
        c(
            "patchable_4_4",
            Category::PatchableEntry,
            &["-fpatchable-function-entry=4,4"],
        ),
        c(
            "evade_ep4",
            Category::PatchableEntry,
            &["-fpatchable-function-entry=4,4"],
        )
        .with_transform("epilogue_pad_injection"),
    ]
}

pub fn builtin_config(name: &str) -> Option<AttackConfiguration> {
    builtin_configs().into_iter().find(|c| c.name == name)
}
