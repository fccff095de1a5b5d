use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?} (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(
    /// What sits at each pre-norm site.
    NormKind {
        LayerNorm => "layernorm",
        RmsNorm => "rmsnorm",
        Dyt => "dyt",
        HardTanh => "hardtanh",
    }
);

string_enum!(
    AttnKind {
        Standard => "standard",
        DiffV1 => "diff_v1",
        DiffSigmoid => "diff_sigmoid",
    }
);

string_enum!(
    FfnKind {
        Gelu => "gelu",
        Swiglu => "swiglu",
    }
);

string_enum!(
    PosKind {
        Learned => "learned",
        Rope => "rope",
    }
);

impl AttnKind {
    pub fn is_differential(self) -> bool {
        matches!(self, AttnKind::DiffV1 | AttnKind::DiffSigmoid)
    }
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_true() -> bool {
    true
}

/// Every architectural and regularization toggle; one record fully
/// determines a model's parameter shapes and forward computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_kv_head: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    pub norm_kind: NormKind,
    pub attn_kind: AttnKind,
    pub ffn_kind: FfnKind,
    pub pos_kind: PosKind,
    pub alpha_init: f64,
    pub dropout_p: f64,
    pub weight_tying: bool,
    /// Constant added to the exp-form λ and used to scale the differential
    /// output by `1 − lambda_init`. Zero keeps λ(0) = 0.
    #[serde(default)]
    pub lambda_init: f64,
    /// Per-head RMS stabilizer on the differential attention output.
    #[serde(default = "default_true")]
    pub diff_stabilizer: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            n_kv_head: 4,
            d_model: 128,
            vocab_size: 256,
            block_size: 64,
            norm_kind: NormKind::LayerNorm,
            attn_kind: AttnKind::Standard,
            ffn_kind: FfnKind::Gelu,
            pos_kind: PosKind::Learned,
            alpha_init: 2.0,
            dropout_p: 0.0,
            weight_tying: true,
            lambda_init: 0.0,
            diff_stabilizer: true,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head.max(1)
    }

    /// Number of pre-norm sites: `ln_1` and `ln_2` per block plus `ln_f`.
    pub fn norm_sites(&self) -> usize {
        2 * self.n_layer + 1
    }

    pub fn site_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.norm_sites());
        for i in 0..self.n_layer {
            names.push(format!("h.{i}.ln_1"));
            names.push(format!("h.{i}.ln_2"));
        }
        names.push("ln_f".to_string());
        names
    }

    /// Hidden width of the feed-forward block: 4·d for GELU, 8/3·d rounded up
    /// to a multiple of 8 for SwiGLU.
    pub fn ffn_hidden(&self) -> usize {
        match self.ffn_kind {
            FfnKind::Gelu => 4 * self.d_model,
            FfnKind::Swiglu => (8 * self.d_model).div_ceil(3).div_ceil(8) * 8,
        }
    }

    pub fn uses_gqa(&self) -> bool {
        self.n_kv_head < self.n_head
    }

    /// Any of the Llama-style components (SwiGLU, RoPE, GQA) is active.
    pub fn is_llama_style(&self) -> bool {
        self.ffn_kind == FfnKind::Swiglu || self.pos_kind == PosKind::Rope || self.uses_gqa()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layer == 0 || self.n_head == 0 || self.n_kv_head == 0 || self.d_model == 0 {
            return fail("n_layer, n_head, n_kv_head and d_model must be positive".into());
        }
        if self.vocab_size == 0 || self.block_size == 0 {
            return fail("vocab_size and block_size must be positive".into());
        }
        if self.d_model % self.n_head != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.n_kv_head > self.n_head || self.n_head % self.n_kv_head != 0 {
            return fail(format!(
                "n_kv_head {} must divide n_head {}",
                self.n_kv_head, self.n_head
            ));
        }
        if self.norm_kind == NormKind::Dyt && !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return fail(format!("alpha_init must be > 0 for dyt, got {}", self.alpha_init));
        }
        if self.attn_kind.is_differential() && (self.n_head % 2 != 0 || self.n_kv_head % 2 != 0) {
            return fail(format!(
                "{} pairs heads into two softmax branches: n_head ({}) and n_kv_head ({}) must be even",
                self.attn_kind, self.n_head, self.n_kv_head
            ));
        }
        if self.pos_kind == PosKind::Rope && self.head_dim() % 2 != 0 {
            return fail(format!("rope needs an even head_dim, got {}", self.head_dim()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return fail("norm_eps and rope_base must be positive".into());
        }
        if !self.lambda_init.is_finite() {
            return fail("lambda_init must be finite".into());
        }
        Ok(())
    }

    /// Condition name used in manifests and reports: `vanilla` for the
    /// LayerNorm/standard/GELU/learned-PE baseline, otherwise the active
    /// toggles joined by `+`.
    pub fn variant_label(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        match self.norm_kind {
            NormKind::LayerNorm => {}
            NormKind::Dyt if (self.alpha_init - 2.0).abs() > 1e-12 => {
                parts.push(format!("dyt_a{}", self.alpha_init))
            }
            k => parts.push(k.to_string()),
        }
        if self.attn_kind != AttnKind::Standard {
            parts.push(self.attn_kind.to_string());
        }
        if self.ffn_kind == FfnKind::Swiglu {
            parts.push("swiglu".into());
        }
        if self.pos_kind == PosKind::Rope {
            parts.push("rope".into());
        }
        if self.uses_gqa() {
            parts.push(format!("gqa{}", self.n_kv_head));
        }
        if self.dropout_p > 0.0 {
            parts.push(format!("drop{}", self.dropout_p));
        }
        if parts.is_empty() {
            "vanilla".into()
        } else {
            parts.join("+")
        }
    }

    /// Shape label shared by all variants of one size: `L{l}-H{h}-D{d}`.
    pub fn scale_label(&self) -> String {
        format!("L{}-H{}-D{}", self.n_layer, self.n_head, self.d_model)
    }

    /// Closed-form parameter count of the GPT-2 layout (LayerNorm, standard
    /// attention, GELU, learned positions, biases everywhere):
    /// `V·D + T·D + L·(12·D² + 13·D) + 2·D`, plus `V·D` when the head is untied.
    pub fn gpt2_param_count(&self) -> usize {
        let (v, t, l, d) = (self.vocab_size, self.block_size, self.n_layer, self.d_model);
        let head = if self.weight_tying { 0 } else { v * d };
        v * d + t * d + l * (12 * d * d + 13 * d) + 2 * d + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_strings_roundtrip() {
        for k in NormKind::ALL {
            assert_eq!(k.as_str().parse::<NormKind>().unwrap(), *k);
        }
        assert!("batchnorm".parse::<NormKind>().is_err());
        assert_eq!(
            serde_json::to_string(&AttnKind::DiffSigmoid).unwrap(),
            "\"diff_sigmoid\""
        );
    }

    #[test]
    fn validation_rules() {
        let ok = ModelConfig::default();
        ok.validate().unwrap();

        let bad = ModelConfig {
            norm_kind: NormKind::Dyt,
            alpha_init: -1.0,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());

        let bad = ModelConfig {
            n_head: 3,
            n_kv_head: 3,
            d_model: 96,
            attn_kind: AttnKind::DiffV1,
            ..ok.clone()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("even"));

        let bad = ModelConfig {
            n_kv_head: 3,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());

        let bad = ModelConfig {
            d_model: 12,
            n_head: 4,
            n_kv_head: 4,
            pos_kind: PosKind::Rope,
            ..ok.clone()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("even head_dim"));

        let bad = ModelConfig {
            dropout_p: 1.0,
            ..ok
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn swiglu_hidden_is_near_iso() {
        let c = ModelConfig {
            d_model: 128,
            ffn_kind: FfnKind::Swiglu,
            ..Default::default()
        };
        assert_eq!(c.ffn_hidden(), 344);
        let c = ModelConfig {
            d_model: 512,
            ffn_kind: FfnKind::Swiglu,
            ..Default::default()
        };
        assert_eq!(c.ffn_hidden(), 1368);
    }

    #[test]
    fn labels() {
        let mut c = ModelConfig::default();
        assert_eq!(c.variant_label(), "vanilla");
        c.norm_kind = NormKind::Dyt;
        assert_eq!(c.variant_label(), "dyt");
        c.alpha_init = 0.5;
        c.attn_kind = AttnKind::DiffV1;
        assert_eq!(c.variant_label(), "dyt_a0.5+diff_v1");
        assert_eq!(c.scale_label(), "L4-H4-D128");
        assert_eq!(c.norm_sites(), 9);
    }
}
