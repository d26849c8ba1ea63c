use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::{Error, Result};

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub use_diba: bool,
    pub use_hfsc: bool,
    pub use_irprelu: bool,
    /// `false` builds the full-precision twin used as a distillation teacher.
    pub binary: bool,
    /// Must stay `false`; accepted so configs can state it explicitly.
    pub two_stage: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// The four rungs of the ablation ladder, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Diba,
    DibaHfsc,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [
        Variant::Baseline,
        Variant::Diba,
        Variant::DibaHfsc,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Diba => "+diba",
            Variant::DibaHfsc => "+diba+hfsc",
            Variant::Full => "+diba+hfsc+irprelu",
        }
    }

    /// `(use_diba, use_hfsc, use_irprelu)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::Diba => (true, false, false),
            Variant::DibaHfsc => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }
}

impl ModelConfig {
    /// 32×32 images, 8×8 patches, 64 channels, 4 heads, 2 blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            heads: 4,
            depth: 2,
            mlp_ratio: 4,
            classes: 10,
            use_diba: true,
            use_hfsc: true,
            use_irprelu: true,
            binary: true,
            two_stage: false,
            seed: 0,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_diba, self.use_hfsc, self.use_irprelu) = v.flags();
        self
    }

    /// Full-precision twin with every ablation switch off.
    pub fn teacher(&self) -> Self {
        Self {
            binary: false,
            use_diba: false,
            use_hfsc: false,
            use_irprelu: false,
            ..self.clone()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be divisible by heads");
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return bad("embed_dim must be even and positive");
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive");
        }
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        if self.two_stage {
            return bad("two-stage training is not supported");
        }
        if !self.binary && (self.use_diba || self.use_hfsc || self.use_irprelu) {
            return bad("the full-precision model takes no binary-attention switches");
        }
        Ok(())
    }

    pub fn write_kv(&self, out: &mut String) {
        let pairs: [(&str, String); 14] = [
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("depth", self.depth.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("classes", self.classes.to_string()),
            ("use_diba", self.use_diba.to_string()),
            ("use_hfsc", self.use_hfsc.to_string()),
            ("use_irprelu", self.use_irprelu.to_string()),
            ("binary", self.binary.to_string()),
            ("two_stage", self.two_stage.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        self.write_kv(&mut s);
        s
    }

    /// Overwrite fields present in `kv`, consuming the keys it recognises.
    pub fn apply_kv(&mut self, kv: &mut BTreeMap<String, String>) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.remove($key) {
                    $field = parse_value($key, &v)?;
                }
            };
        }
        take!("image_size", self.image_size);
        take!("patch_size", self.patch_size);
        take!("in_channels", self.in_channels);
        take!("embed_dim", self.embed_dim);
        take!("heads", self.heads);
        take!("depth", self.depth);
        take!("mlp_ratio", self.mlp_ratio);
        take!("classes", self.classes);
        take!("use_diba", self.use_diba);
        take!("use_hfsc", self.use_hfsc);
        take!("use_irprelu", self.use_irprelu);
        take!("binary", self.binary);
        take!("two_stage", self.two_stage);
        take!("seed", self.seed);
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = parse_kv(text)?;
        let mut cfg = Self::toy();
        cfg.apply_kv(&mut kv)?;
        reject_unknown(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value",
                no + 1
            )));
        };
        if map
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key {}",
                no + 1,
                k.trim()
            )));
        }
    }
    Ok(map)
}

pub(crate) fn reject_unknown(kv: &BTreeMap<String, String>) -> Result<()> {
    match kv.keys().next() {
        Some(k) => Err(Error::Config(format!("unknown key {k}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::toy().with_variant(Variant::Diba);
        c.seed = 17;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig::from_kv("heads=3").is_err());
        assert!(ModelConfig::from_kv("patch_size=7").is_err());
        assert!(ModelConfig::from_kv("two_stage=true").is_err());
        assert!(ModelConfig::from_kv("colour=blue").is_err());
        assert!(ModelConfig::from_kv("depth").is_err());
        assert!(ModelConfig::from_kv("depth=2\ndepth=3").is_err());
        assert!(ModelConfig::from_kv("embed_dim=9\nheads=3").is_err());
        let t = ModelConfig::toy().teacher();
        assert!(t.validate().is_ok());
        assert_eq!(ModelConfig::toy().tokens(), 16);
    }
}
