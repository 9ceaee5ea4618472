//! Parameter grouping and freeze plans.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    KV,
    TransBlock,
    StyleProj,
    Others,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::KV, Self::TransBlock, Self::StyleProj, Self::Others];

    /// Style-related groups; everything else is content-related.
    pub fn is_style(self) -> bool {
        !matches!(self, Self::Others)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::KV => "KV",
            Self::TransBlock => "TransBlock",
            Self::StyleProj => "StyleProj",
            Self::Others => "Others",
        };
        f.write_str(s)
    }
}

const TRANSFORMER_LAYERS: [&str; 5] = ["norm_in", "proj_in", "norm_cross", "norm_ff", "proj_out"];

fn leaf(rest: &[&str]) -> bool {
    matches!(rest, ["weight"] | ["bias"])
}

fn is_res_block(rest: &[&str]) -> bool {
    match rest {
        [layer, tail @ ..] => {
            matches!(*layer, "norm1" | "conv1" | "time_proj" | "norm2" | "conv2" | "skip") && leaf(tail)
        }
        _ => false,
    }
}

fn classify_transformer(rest: &[&str], name: &str) -> Result<ParamGroup> {
    match rest {
        ["cross", "to_k" | "to_v", "weight"] => Ok(ParamGroup::KV),
        ["cross", "to_q", "weight"] | ["cross", "to_out", "weight" | "bias"] => Ok(ParamGroup::TransBlock),
        ["ff", "fc1" | "fc2", "weight" | "bias"] => Ok(ParamGroup::TransBlock),
        [layer, tail @ ..] if TRANSFORMER_LAYERS.contains(layer) && leaf(tail) => {
            Ok(ParamGroup::TransBlock)
        }
        _ => Err(unknown(name)),
    }
}

fn unknown(name: &str) -> Error {
    Error::Internal(format!("parameter {name:?} matches no group rule"))
}

/// Group of one parameter by its hierarchical name.
pub fn classify(name: &str) -> Result<ParamGroup> {
    let parts: Vec<&str> = name.split('.').collect();
    let index = |s: &str| s.parse::<usize>().is_ok();
    match parts.as_slice() {
        ["style", "proj", tail @ ..] if leaf(tail) => Ok(ParamGroup::StyleProj),
        ["style", "trunk", i, "conv" | "norm", tail @ ..] if index(i) && leaf(tail) => Ok(ParamGroup::Others),
        ["unet", "conv_in" | "norm_out" | "conv_out", tail @ ..] if leaf(tail) => Ok(ParamGroup::Others),
        ["unet", "time_embed", "0" | "1", tail @ ..] if leaf(tail) => Ok(ParamGroup::Others),
        ["unet", "down" | "up", i, "res", j, rest @ ..] if index(i) && index(j) && is_res_block(rest) => {
            Ok(ParamGroup::Others)
        }
        ["unet", "down", i, "downsample", tail @ ..] | ["unet", "up", i, "upsample", tail @ ..]
            if index(i) && leaf(tail) =>
        {
            Ok(ParamGroup::Others)
        }
        ["unet", "mid", "res", j, rest @ ..] if index(j) && is_res_block(rest) => Ok(ParamGroup::Others),
        ["unet", "down" | "up", i, "attn", j, rest @ ..] if index(i) && index(j) => classify_transformer(rest, name),
        ["unet", "mid", "attn", rest @ ..] => classify_transformer(rest, name),
        _ => Err(unknown(name)),
    }
}

/// Total assignment of named parameters to groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterGroups {
    map: BTreeMap<String, ParamGroup>,
}

impl ParameterGroups {
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let map = names
            .into_iter()
            .map(|n| classify(n).map(|g| (n.to_string(), g)))
            .collect::<Result<_>>()?;
        Ok(Self { map })
    }

    /// For externally built models whose naming differs from the U-Net's.
    pub fn from_map(map: BTreeMap<String, ParamGroup>) -> Self {
        Self { map }
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<&str> {
        self.iter().filter(|(_, g)| *g == group).map(|(n, _)| n).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezePlan {
    No,
    Clip,
    Kv,
    All,
    Peft,
}

impl FreezePlan {
    pub const ALL_PLANS: [FreezePlan; 5] = [Self::No, Self::Clip, Self::Kv, Self::All, Self::Peft];

    pub fn trainable(self, group: ParamGroup) -> bool {
        match self {
            Self::No => false,
            Self::Clip => group == ParamGroup::StyleProj,
            Self::Kv => group == ParamGroup::KV,
            Self::All => true,
            Self::Peft => group.is_style(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::No => "no",
            Self::Clip => "clip",
            Self::Kv => "kv",
            Self::All => "all",
            Self::Peft => "peft",
        }
    }
}

impl fmt::Display for FreezePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL_PLANS
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation(format!("unknown freeze plan {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules() {
        use ParamGroup::*;
        let cases = [
            ("unet.down.1.attn.0.cross.to_k.weight", KV),
            ("unet.mid.attn.cross.to_v.weight", KV),
            ("unet.up.2.attn.1.cross.to_q.weight", TransBlock),
            ("unet.up.2.attn.1.cross.to_out.bias", TransBlock),
            ("unet.down.1.attn.0.ff.fc1.weight", TransBlock),
            ("unet.down.1.attn.0.norm_in.bias", TransBlock),
            ("unet.mid.attn.proj_out.weight", TransBlock),
            ("style.proj.weight", StyleProj),
            ("style.trunk.3.conv.weight", Others),
            ("unet.time_embed.0.weight", Others),
            ("unet.down.0.res.1.conv2.weight", Others),
            ("unet.down.0.res.1.time_proj.bias", Others),
            ("unet.up.1.upsample.weight", Others),
            ("unet.mid.res.0.skip.weight", Others),
            ("unet.conv_out.bias", Others),
        ];
        for (name, g) in cases {
            assert_eq!(classify(name).unwrap(), g, "{name}");
        }
    }

    #[test]
    fn unknown_names_fail_loudly() {
        for name in [
            "unet.down.0.attn.0.cross.to_z.weight",
            "style.embed.weight",
            "unet.down.x.res.0.conv1.weight",
            "decoder.conv.weight",
            "unet.mid.attn.weight",
        ] {
            assert!(matches!(classify(name), Err(Error::Internal(_))), "{name}");
        }
    }

    #[test]
    fn plans() {
        use ParamGroup::*;
        assert!(ParamGroup::ALL.iter().all(|&g| !FreezePlan::No.trainable(g)));
        assert!(ParamGroup::ALL.iter().all(|&g| FreezePlan::All.trainable(g)));
        assert!(FreezePlan::Peft.trainable(KV) && FreezePlan::Peft.trainable(TransBlock));
        assert!(FreezePlan::Peft.trainable(StyleProj) && !FreezePlan::Peft.trainable(Others));
        assert!(FreezePlan::Clip.trainable(StyleProj) && !FreezePlan::Clip.trainable(KV));
        assert!(FreezePlan::Kv.trainable(KV) && !FreezePlan::Kv.trainable(TransBlock));
        assert_eq!("PEFT".parse::<FreezePlan>().unwrap(), FreezePlan::Peft);
        assert!("lora".parse::<FreezePlan>().is_err());
    }
}
