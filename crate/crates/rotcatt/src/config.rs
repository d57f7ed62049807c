//! Hyperparameters and the derived tensor-shape contract.
//!
//! Every stage of the network is shape-checked against a [`ShapePlan`]
//! computed up front from the [`ModelConfig`], so a misconfiguration fails
//! before any arithmetic runs.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// All architecture hyperparameters.
///
/// `depth` is the number of resolution levels D; levels `1..D-1` feed the
/// transformer path and level D is the bottleneck. `window` is the number of
/// consecutive z-slices processed per forward pass (the batch axis doubles as
/// the slice axis).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub window: usize,
    pub num_classes: usize,
    pub transformer_layers: usize,
    pub embed_dims: Vec<usize>,
    pub mlp_ratio: usize,
    pub num_heads: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub rotatory_enabled: bool,
    /// Ties the four single-attention parameter sets of each rotatory block.
    pub rotatory_tied: bool,
    /// Dropout probability applied to token embeddings during training.
    pub embed_dropout: f64,
}

/// Default embedding dims when the config does not override them.
pub fn default_embed_dims(depth: usize, base_channels: usize) -> Vec<usize> {
    (1..depth).map(|i| base_channels << (i + 1)).collect()
}

impl Default for ModelConfig {
    /// Desk-scale reference configuration.
    fn default() -> Self {
        let depth = 4;
        let base_channels = 16;
        ModelConfig {
            depth,
            base_channels,
            input_height: 64,
            input_width: 64,
            window: 8,
            num_classes: 4,
            transformer_layers: 4,
            embed_dims: default_embed_dims(depth, base_channels),
            mlp_ratio: 4,
            num_heads: 4,
            alpha: 0.6,
            epsilon: 1e-5,
            rotatory_enabled: true,
            rotatory_tied: false,
            embed_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Checks every config invariant, naming the violated constraint.
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        let half = 1usize << (self.depth - 1);
        if self.input_height % half != 0 {
            return Err(Error::config(format!(
                "input_height {} not divisible by 2^(depth-1) = {half}",
                self.input_height
            )));
        }
        if self.input_width % half != 0 {
            return Err(Error::config(format!(
                "input_width {} not divisible by 2^(depth-1) = {half}",
                self.input_width
            )));
        }
        let p1 = 1usize << self.depth;
        if (self.input_height * self.input_width) % (p1 * p1) != 0 {
            return Err(Error::config(format!(
                "input_height*input_width = {} not divisible by p_1^2 = {}",
                self.input_height * self.input_width,
                p1 * p1
            )));
        }
        // Patch grids must be integral at every level, which reduces to the
        // level-1 condition H, W divisible by 2^depth.
        if self.input_height % p1 != 0 || self.input_width % p1 != 0 {
            return Err(Error::config(format!(
                "input dims ({}, {}) must be divisible by the level-1 patch size {p1}",
                self.input_height, self.input_width
            )));
        }
        if self.rotatory_enabled && self.window < 3 {
            return Err(Error::config(format!(
                "window must be >= 3 when rotatory_enabled (three consecutive slices required), got {}",
                self.window
            )));
        }
        if self.window == 0 {
            return Err(Error::config("window must be >= 1"));
        }
        if self.embed_dims.len() != self.depth - 1 {
            return Err(Error::config(format!(
                "embed_dims must have depth-1 = {} entries, got {}",
                self.depth - 1,
                self.embed_dims.len()
            )));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be >= 1"));
        }
        for (idx, &d) in self.embed_dims.iter().enumerate() {
            if d == 0 || d % self.num_heads != 0 {
                return Err(Error::config(format!(
                    "embed_dims[{idx}] = {d} not divisible by num_heads = {}",
                    self.num_heads
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.embed_dropout) {
            return Err(Error::config(format!(
                "embed_dropout must be in [0,1), got {}",
                self.embed_dropout
            )));
        }
        Ok(())
    }

    /// Channel count at level `i` (1-based); level `depth` is the bottleneck.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Serializes to the flat `key = value` config format.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let dims = self
            .embed_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "transformer_layers = {}", self.transformer_layers);
        let _ = writeln!(s, "embed_dims = {dims}");
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "rotatory_enabled = {}", self.rotatory_enabled);
        let _ = writeln!(s, "rotatory_tied = {}", self.rotatory_tied);
        let _ = writeln!(s, "embed_dropout = {}", self.embed_dropout);
        s
    }
}

/// Shape contract for one transformer-path level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPlan {
    /// 1-based level index.
    pub level: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Patch size p_i = 2^(D-i+1).
    pub patch: usize,
    /// Patch grid (height/patch, width/patch); tokens are row-major over it.
    pub grid: (usize, usize),
    pub embed_dim: usize,
}

/// The derived shape of every tensor the architecture produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub window: usize,
    pub num_classes: usize,
    /// Levels 1..D-1 (transformer path).
    pub levels: Vec<LevelPlan>,
    /// Bottleneck (channels, height, width) at level D.
    pub bottleneck: (usize, usize, usize),
    /// Token sequence length, identical at every level.
    pub tokens: usize,
}

impl ShapePlan {
    /// Feature-map shape (B, C_i, H_i, W_i) at a 1-based level, including the
    /// bottleneck at level D.
    pub fn feature_shape(&self, level: usize) -> [usize; 4] {
        if level == self.levels.len() + 1 {
            let (c, h, w) = self.bottleneck;
            [self.window, c, h, w]
        } else {
            let l = &self.levels[level - 1];
            [self.window, l.channels, l.height, l.width]
        }
    }

    /// Token-tensor shape (B, n, d_f^i) at a 1-based level.
    pub fn token_shape(&self, level: usize) -> [usize; 3] {
        let l = &self.levels[level - 1];
        [self.window, self.tokens, l.embed_dim]
    }

    pub fn input_shape(&self) -> [usize; 4] {
        let l = &self.levels[0];
        [self.window, 1, l.height, l.width]
    }

    pub fn logits_shape(&self) -> [usize; 4] {
        let l = &self.levels[0];
        [self.window, self.num_classes, l.height, l.width]
    }

    pub fn depth(&self) -> usize {
        self.levels.len() + 1
    }
}

/// Derives the full shape plan from a config. Pure: equal configs yield
/// structurally equal plans.
pub fn derive_shapes(config: &ModelConfig) -> Result<ShapePlan> {
    config.validate()?;
    let d = config.depth;
    let mut levels = Vec::with_capacity(d - 1);
    let mut tokens_per_level = Vec::with_capacity(d - 1);
    for i in 1..d {
        let channels = config.channels_at(i);
        let height = config.input_height >> (i - 1);
        let width = config.input_width >> (i - 1);
        let patch = 1usize << (d - i + 1);
        if height % patch != 0 || width % patch != 0 {
            return Err(Error::config(format!(
                "level {i} spatial dims ({height}, {width}) not divisible by patch size {patch}"
            )));
        }
        let grid = (height / patch, width / patch);
        tokens_per_level.push(grid.0 * grid.1);
        levels.push(LevelPlan {
            level: i,
            channels,
            height,
            width,
            patch,
            grid,
            embed_dim: config.embed_dims[i - 1],
        });
    }
    let tokens = tokens_per_level[0];
    for (idx, &n) in tokens_per_level.iter().enumerate() {
        if n != tokens {
            return Err(Error::config(format!(
                "sequence length differs across levels: level 1 has {tokens}, level {} has {n}",
                idx + 1
            )));
        }
    }
    let bottleneck = (
        config.channels_at(d),
        config.input_height >> (d - 1),
        config.input_width >> (d - 1),
    );
    Ok(ShapePlan {
        window: config.window,
        num_classes: config.num_classes,
        levels,
        bottleneck,
        tokens,
    })
}

/// Asserts that a tensor shape matches the expected shape exactly, naming the
/// first mismatching axis. Used as a checkpoint by every module.
pub fn validate_tensor(actual: &[usize], expected: &[usize], context: &str) -> Result<()> {
    if actual.len() != expected.len() {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
            axis: actual.len().min(expected.len()),
        });
    }
    for (axis, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        if a != e {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: expected.to_vec(),
                actual: actual.to_vec(),
                axis,
            });
        }
    }
    Ok(())
}

/// Parses the flat `key = value` config format (UTF-8, `#` comments).
pub fn parse_key_values(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        let value = match value.find('#') {
            Some(pos) => &value[..pos],
            None => value,
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("key {key}: cannot parse value {value:?}")))
}

pub(crate) fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_value::<usize>(key, part.trim()))
        .collect()
}

impl ModelConfig {
    /// Applies `key = value` settings on top of `self`. Keys not belonging to
    /// the model config are left for the caller (returned untouched keys are
    /// an error here; the run config wraps this with its own keys).
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "depth" => self.depth = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "input_height" => self.input_height = parse_value(key, value)?,
            "input_width" => self.input_width = parse_value(key, value)?,
            "window" => self.window = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "transformer_layers" => self.transformer_layers = parse_value(key, value)?,
            "embed_dims" => self.embed_dims = parse_usize_list(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "num_heads" => self.num_heads = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "rotatory_enabled" => self.rotatory_enabled = parse_value(key, value)?,
            "rotatory_tied" => self.rotatory_tied = parse_value(key, value)?,
            "embed_dropout" => self.embed_dropout = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from `key = value` text, starting from defaults.
    /// `embed_dims` defaults track `depth`/`base_channels` unless set.
    pub fn from_key_values(map: &HashMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let explicit_dims = map.contains_key("embed_dims");
        // Apply depth/base_channels first so derived defaults line up.
        for key in ["depth", "base_channels"] {
            if let Some(v) = map.get(key) {
                cfg.apply_key(key, v)?;
            }
        }
        if !explicit_dims {
            cfg.embed_dims = default_embed_dims(cfg.depth, cfg.base_channels);
        }
        for (key, value) in map {
            cfg.apply_key(key, value)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_patch_sizes_and_tokens() {
        // D=4, H=W=256, C=64: p = {16, 8, 4}, n = 256 at every level.
        let cfg = ModelConfig {
            depth: 4,
            base_channels: 64,
            input_height: 256,
            input_width: 256,
            embed_dims: default_embed_dims(4, 64),
            ..ModelConfig::default()
        };
        let plan = derive_shapes(&cfg).unwrap();
        let patches: Vec<usize> = plan.levels.iter().map(|l| l.patch).collect();
        assert_eq!(patches, vec![16, 8, 4]);
        assert_eq!(plan.tokens, 256);
        for (i, l) in plan.levels.iter().enumerate() {
            assert_eq!(l.grid.0 * l.grid.1, 256, "level {}", i + 1);
        }
        assert_eq!(default_embed_dims(4, 64), vec![256, 512, 1024]);
    }

    #[test]
    fn minimal_config() {
        // D=2, H=W=8, C=1: p = {4}, n = 4, level-1 shape (B,1,8,8).
        let cfg = ModelConfig {
            depth: 2,
            base_channels: 1,
            input_height: 8,
            input_width: 8,
            window: 3,
            embed_dims: vec![4],
            num_heads: 1,
            ..ModelConfig::default()
        };
        let plan = derive_shapes(&cfg).unwrap();
        assert_eq!(plan.levels.len(), 1);
        assert_eq!(plan.levels[0].patch, 4);
        assert_eq!(plan.tokens, 4);
        assert_eq!(plan.feature_shape(1), [3, 1, 8, 8]);
    }

    #[test]
    fn desk_scale_config() {
        // D=4, H=W=64, C=16: p = {16,8,4}, n = 16, level-3 shape (B,64,16,16).
        let plan = derive_shapes(&ModelConfig::default()).unwrap();
        let patches: Vec<usize> = plan.levels.iter().map(|l| l.patch).collect();
        assert_eq!(patches, vec![16, 8, 4]);
        assert_eq!(plan.tokens, 16); // 64*64/16^2
        assert_eq!(plan.feature_shape(3), [8, 64, 16, 16]);
        assert_eq!(plan.bottleneck, (128, 8, 8));
    }

    #[test]
    fn derive_shapes_is_pure() {
        let cfg = ModelConfig::default();
        assert_eq!(derive_shapes(&cfg).unwrap(), derive_shapes(&cfg).unwrap());
    }

    #[test]
    fn rejects_named_violations() {
        let mut cfg = ModelConfig::default();
        cfg.depth = 1;
        let err = derive_shapes(&cfg).unwrap_err().to_string();
        assert!(err.contains("depth"), "{err}");

        let mut cfg = ModelConfig::default();
        cfg.input_height = 60;
        let err = derive_shapes(&cfg).unwrap_err().to_string();
        assert!(err.contains("input_height"), "{err}");

        let mut cfg = ModelConfig::default();
        cfg.window = 2;
        let err = derive_shapes(&cfg).unwrap_err().to_string();
        assert!(err.contains("window"), "{err}");

        let mut cfg = ModelConfig::default();
        cfg.embed_dims = vec![65, 128, 256];
        let err = derive_shapes(&cfg).unwrap_err().to_string();
        assert!(err.contains("num_heads"), "{err}");
    }

    #[test]
    fn window_two_ok_without_rotatory() {
        let mut cfg = ModelConfig::default();
        cfg.window = 2;
        cfg.rotatory_enabled = false;
        assert!(derive_shapes(&cfg).is_ok());
    }

    #[test]
    fn validate_tensor_exact_and_axis_naming() {
        assert!(validate_tensor(&[3, 64, 256, 256], &[3, 64, 256, 256], "x").is_ok());
        let err = validate_tensor(&[3, 64, 128, 256], &[3, 64, 256, 256], "x").unwrap_err();
        match err {
            Error::ShapeMismatch { axis, .. } => assert_eq!(axis, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn validate_tensor_bottleneck_full_scale() {
        // D=4, C=64, H=W=256: bottleneck channels C*2^(D-1) = 512 at 32x32.
        let cfg = ModelConfig {
            depth: 4,
            base_channels: 64,
            input_height: 256,
            input_width: 256,
            window: 3,
            embed_dims: default_embed_dims(4, 64),
            ..ModelConfig::default()
        };
        let plan = derive_shapes(&cfg).unwrap();
        assert!(validate_tensor(&[3, 512, 32, 32], &plan.feature_shape(4), "bottleneck").is_ok());
    }

    #[test]
    fn config_file_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.alpha = 0.25;
        cfg.rotatory_enabled = false;
        let text = cfg.to_config_string();
        let map = parse_key_values(&text).unwrap();
        let parsed = ModelConfig::from_key_values(&map).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_file_comments_and_errors() {
        let map = parse_key_values("# comment\n depth = 3 # trailing\n\n").unwrap();
        assert_eq!(map.get("depth").map(String::as_str), Some("3"));
        assert!(parse_key_values("depth 3").is_err());
    }
}
