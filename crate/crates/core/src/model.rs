//! Model configuration, parameter layout and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, RotarySpec, Var};
use crate::error::{Error, Result};
use crate::state::Trajectory;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Token width shared by every block.
    pub width: usize,
    pub heads: usize,
    pub rotary_dim: usize,
    pub rope_base: f64,
    /// Rotary length scale; the spatial radius when unset.
    pub rope_scale: Option<f64>,
    pub lattice_res: usize,
    pub spatial_width: usize,
    pub topology_width: usize,
    pub boundary_width: usize,
    pub self_width: usize,
    pub spatial_radius: f64,
    /// Boundary search radius; the spatial radius when unset.
    pub boundary_radius: Option<f64>,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub merge_hidden: usize,
    pub head_hidden: Vec<usize>,
    pub particle_channels: usize,
    pub boundary_channels: usize,
    /// Per-channel `(a - center) / scale` applied to particle attributes
    /// before tokenizing. Both empty means attributes pass through unchanged.
    pub attribute_center: Vec<f64>,
    pub attribute_scale: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            rotary_dim: 12,
            rope_base: 10000.0,
            rope_scale: None,
            lattice_res: 4,
            spatial_width: 16,
            topology_width: 16,
            boundary_width: 16,
            self_width: 16,
            spatial_radius: 0.1,
            boundary_radius: None,
            encoder_layers: 3,
            decoder_layers: 3,
            ffn_hidden: 128,
            merge_hidden: 64,
            head_hidden: vec![32, 32],
            particle_channels: 1,
            boundary_channels: 3,
            attribute_center: Vec::new(),
            attribute_scale: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("model config", reason));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads must divide width {}",
                self.heads, self.width
            ));
        }
        if self.lattice_res < 2 {
            return bad(format!(
                "lattice resolution {} must be at least 2",
                self.lattice_res
            ));
        }
        if !(self.spatial_radius > 0.0) || self.boundary_radius.is_some_and(|r| !(r > 0.0)) {
            return bad("radii must be positive".into());
        }
        if self.particle_channels == 0 {
            return bad("the mass channel is required".into());
        }
        let widths = [
            self.spatial_width,
            self.topology_width,
            self.boundary_width,
            self.self_width,
            self.ffn_hidden,
            self.merge_hidden,
        ];
        if widths.contains(&0) || self.head_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        let (nc, ns) = (self.attribute_center.len(), self.attribute_scale.len());
        if (nc, ns) != (0, 0) && (nc, ns) != (self.particle_channels, self.particle_channels) {
            return bad(format!(
                "attribute normalization has {nc} centers and {ns} scales for {} channels",
                self.particle_channels
            ));
        }
        if self.attribute_center.iter().any(|c| !c.is_finite())
            || self
                .attribute_scale
                .iter()
                .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return bad("attribute centers must be finite and scales positive".into());
        }
        self.rotary().validate()
    }

    /// Sets the attribute normalization to the per-channel mean and standard
    /// deviation over `data`. Channels that never vary are left unchanged.
    pub fn fit_attribute_normalization(&mut self, data: &[Trajectory]) -> Result<()> {
        let c = self.particle_channels;
        if let Some(t) = data.iter().find(|t| t.attribute_channels() != c) {
            return Err(Error::invalid(
                "attribute normalization",
                format!("{} channels in data, {c} in config", t.attribute_channels()),
            ));
        }
        let rows: Vec<&[f64]> = data.iter().flat_map(|t| t.attributes().chunks(c)).collect();
        if rows.is_empty() {
            return Err(Error::invalid("attribute normalization", "no particles"));
        }
        let n = rows.len() as f64;
        let (mut center, mut scale) = (vec![0.0; c], vec![1.0; c]);
        for k in 0..c {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-9 * mean.abs().max(1.0) {
                center[k] = mean;
                scale[k] = var.sqrt();
            }
        }
        self.attribute_center = center;
        self.attribute_scale = scale;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn boundary_radius(&self) -> f64 {
        self.boundary_radius.unwrap_or(self.spatial_radius)
    }

    pub fn rotary(&self) -> RotarySpec {
        RotarySpec {
            heads: self.heads,
            head_dim: self.head_dim(),
            rotary_dim: self.rotary_dim,
            base: self.rope_base,
            scale: self.rope_scale.unwrap_or(self.spatial_radius),
        }
    }

    pub(crate) fn spatial_in(&self) -> usize {
        3 + self.particle_channels
    }

    pub(crate) fn topology_in(&self) -> usize {
        6 + self.particle_channels
    }

    pub(crate) fn self_in(&self) -> usize {
        3 + self.particle_channels
    }

    pub(crate) fn token_in(&self) -> usize {
        self.spatial_width + self.topology_width + self.boundary_width + self.self_width
    }

    /// Widths of the prediction head from token width to the six outputs.
    pub fn head_widths(&self) -> Vec<usize> {
        let mut w = vec![self.width];
        w.extend(&self.head_hidden);
        w.push(6);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, path: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { path, shape, init });
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let bound = (1.0 / fan_in as f64).sqrt();
        self.push(
            format!("{prefix}.w"),
            vec![fan_in, fan_out],
            Init::Uniform(bound),
        );
        if bias {
            self.push(format!("{prefix}.b"), vec![fan_out], Init::Uniform(bound));
        }
    }

    fn norm(&mut self, prefix: &str, width: usize) {
        self.push(format!("{prefix}.gain"), vec![width], Init::Const(1.0));
        self.push(format!("{prefix}.bias"), vec![width], Init::Const(0.0));
    }

    fn attention(&mut self, prefix: &str, d: usize, cross: bool) {
        if cross {
            self.norm(&format!("{prefix}.norm_q"), d);
            self.norm(&format!("{prefix}.norm_kv"), d);
        } else {
            self.norm(&format!("{prefix}.norm"), d);
        }
        for p in ["wq", "wk", "wv", "wo"] {
            self.linear(&format!("{prefix}.{p}"), d, d, false);
        }
    }

    fn head(&mut self, prefix: &str, widths: &[usize]) {
        let layers = widths.len().saturating_sub(1);
        for l in 0..layers {
            let p = format!("{prefix}.layer{l}");
            self.linear(&p, widths[l], widths[l + 1], true);
            if l + 1 < layers {
                self.norm(&format!("{p}.norm"), widths[l + 1]);
            }
        }
    }
}

/// Every parameter of the model, in declaration order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs::default();
    let g = cfg.lattice_res;
    let lattice = |cin: usize, cout: usize| vec![g, g, g, cin, cout];
    s.push(
        "tokenizer.lattice.S".into(),
        lattice(cfg.spatial_in(), cfg.spatial_width),
        Init::Uniform(1e-2),
    );
    s.push(
        "tokenizer.lattice.T".into(),
        lattice(cfg.topology_in(), cfg.topology_width),
        Init::Uniform(1e-2),
    );
    s.push(
        "tokenizer.lattice.B".into(),
        lattice(cfg.boundary_channels.max(1), cfg.boundary_width),
        Init::Uniform(1e-2),
    );
    s.linear("tokenizer.self", cfg.self_in(), cfg.self_width, true);
    s.linear("tokenizer.mlp.fc1", cfg.token_in(), cfg.width, true);
    s.linear("tokenizer.mlp.fc2", cfg.width, cfg.width, true);
    s.norm("tokenizer.mlp.norm", cfg.width);
    let d = cfg.width;
    for l in 0..cfg.encoder_layers {
        s.attention(&format!("encoder.layer{l}.attn"), d, false);
        s.linear(
            &format!("encoder.layer{l}.merge_mlp.fc1"),
            d,
            cfg.merge_hidden,
            true,
        );
        s.linear(
            &format!("encoder.layer{l}.merge_mlp.fc2"),
            cfg.merge_hidden,
            d,
            true,
        );
    }
    for l in 0..cfg.decoder_layers {
        s.attention(&format!("decoder.layer{l}.cross"), d, true);
        s.attention(&format!("decoder.layer{l}.self"), d, false);
        s.norm(&format!("decoder.layer{l}.ffn.norm"), d);
        s.linear(
            &format!("decoder.layer{l}.ffn.fc1"),
            d,
            cfg.ffn_hidden,
            true,
        );
        s.linear(
            &format!("decoder.layer{l}.ffn.fc2"),
            cfg.ffn_hidden,
            d,
            true,
        );
    }
    s.head("head", &cfg.head_widths());
    let mut specs = s.0;
    // The untrained corrector outputs zero, so rollouts start at the predictor.
    let last = cfg.head_widths().len() - 2;
    for spec in &mut specs {
        if spec.path.starts_with(&format!("head.layer{last}.")) {
            spec.init = Init::Const(0.0);
        }
    }
    specs
}

/// Parameter count of an MLP head with the given layer widths, including
/// the layer norms after each hidden layer.
pub fn head_param_count(widths: &[usize]) -> usize {
    let mut s = Specs::default();
    s.head("head", widths);
    s.0.iter().map(|p| p.shape.iter().product::<usize>()).sum()
}

/// Widths of the full-scale head: 1152 -> 512 x4 -> 6.
pub const FULL_SCALE_HEAD_WIDTHS: [usize; 6] = [1152, 512, 512, 512, 512, 6];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub tokenizer: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.tokenizer + self.encoder + self.decoder + self.head
    }
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let specs = param_specs(cfg);
    let under = |prefix: &str| -> usize {
        specs
            .iter()
            .filter(|p| p.path.starts_with(prefix))
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    };
    Ok(ParamCounts {
        tokenizer: under("tokenizer."),
        encoder: under("encoder."),
        decoder: under("decoder."),
        head: under("head."),
    })
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        match spec.init {
            Init::Uniform(b) => store.insert_uniform(&spec.path, &spec.shape, b, &mut rng)?,
            Init::Const(c) => store.insert_const(&spec.path, &spec.shape, c)?,
        }
    }
    Ok(store)
}

/// Zeroes every residual-branch output projection (attention outputs,
/// merge and feed-forward second layers), making each block an identity.
pub fn zero_residual_outputs(store: &mut ParamStore) {
    for (path, p) in store.iter_mut() {
        let residual_out = path.ends_with(".wo.w")
            || path.contains(".merge_mlp.fc2.")
            || path.contains(".ffn.fc2.");
        if residual_out {
            p.value.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// A configuration and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Checks that the parameter set matches the layout implied by the config.
    pub fn check_layout(&self) -> Result<()> {
        for spec in param_specs(&self.config) {
            let p = self.params.get(&spec.path).ok_or_else(|| {
                Error::invalid("checkpoint", format!("missing parameter {}", spec.path))
            })?;
            if p.shape != spec.shape {
                return Err(Error::invalid(
                    "checkpoint",
                    format!(
                        "{} has shape {:?}, config implies {:?}",
                        spec.path, p.shape, spec.shape
                    ),
                ));
            }
        }
        if self.params.len() != param_specs(&self.config).len() {
            return Err(Error::invalid(
                "checkpoint",
                "parameter set has entries the config does not declare",
            ));
        }
        Ok(())
    }
}

pub(crate) fn linear(g: &mut Graph, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(s, &format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if s.contains(&bias) {
        let b = g.param(s, &bias)?;
        g.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub(crate) fn norm(g: &mut Graph, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(s, &format!("{prefix}.gain"))?;
    let bias = g.param(s, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Residual two-layer MLP: `x + fc2(relu(fc1(x)))`.
pub(crate) fn residual_mlp(g: &mut Graph, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, s, &format!("{prefix}.fc1"), x)?;
    let h = g.relu(h);
    let h = linear(g, s, &format!("{prefix}.fc2"), h)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_head_count() {
        assert_eq!(head_param_count(&FULL_SCALE_HEAD_WIDTHS), 1_385_478);
        assert_eq!(
            head_param_count(&FULL_SCALE_HEAD_WIDTHS),
            591_360 + 3 * 263_680 + 3_078
        );
    }

    #[test]
    fn small_head_counts() {
        assert_eq!(
            head_param_count(&[8, 4, 2]),
            (8 * 4 + 4) + 2 * 4 + (4 * 2 + 2)
        );
        assert_eq!(head_param_count(&[]), 0);
        assert_eq!(head_param_count(&[8]), 0);
    }

    #[test]
    fn counts_agree_with_initialized_store() {
        let cfg = ModelConfig {
            particle_channels: 2,
            boundary_channels: 4,
            ..ModelConfig::default()
        };
        let store = init_params(&cfg, 0).unwrap();
        let counts = count_params(&cfg).unwrap();
        assert_eq!(counts.total(), store.scalar_count());
        assert_eq!(counts.head, head_param_count(&cfg.head_widths()));
        assert_eq!(counts.encoder, store.scalar_count_under("encoder."));
    }

    #[test]
    fn final_head_layer_starts_at_zero() {
        let store = init_params(&ModelConfig::default(), 3).unwrap();
        assert!(store
            .get("head.layer2.w")
            .unwrap()
            .value
            .iter()
            .all(|&x| x == 0.0));
        assert!(store
            .get("head.layer2.b")
            .unwrap()
            .value
            .iter()
            .all(|&x| x == 0.0));
        assert!(store
            .get("head.layer1.w")
            .unwrap()
            .value
            .iter()
            .any(|&x| x != 0.0));
        let lat = &store.get("tokenizer.lattice.S").unwrap().value;
        assert!(lat.iter().all(|x| x.abs() <= 1e-2));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
        assert_ne!(
            init_params(&cfg, 9).unwrap(),
            init_params(&cfg, 10).unwrap()
        );
    }

    #[test]
    fn validation_catches_bad_configs() {
        let bad = [
            ModelConfig {
                heads: 5,
                ..Default::default()
            },
            ModelConfig {
                rotary_dim: 8,
                ..Default::default()
            },
            ModelConfig {
                lattice_res: 1,
                ..Default::default()
            },
            ModelConfig {
                spatial_radius: 0.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn attribute_normalization_fits_varying_channels_only() {
        let mut ds = crate::toydata::DatasetSpec::new(crate::toydata::Scenario::Slope, 3, 0);
        ds.frames = 3;
        let data = ds.generate().unwrap();
        let mut cfg = ModelConfig {
            particle_channels: 2,
            ..ModelConfig::default()
        };
        cfg.fit_attribute_normalization(&data).unwrap();
        assert_eq!(cfg.attribute_center[0], 0.0);
        assert_eq!(cfg.attribute_scale[0], 1.0);
        assert!((cfg.attribute_center[1] - 0.3).abs() < 1e-7);
        let sd = (2.0f64 / 3.0).sqrt() * 0.1;
        assert!((cfg.attribute_scale[1] - sd).abs() < 1e-7);
        cfg.validate().unwrap();
        let mut wrong = ModelConfig::default();
        assert!(wrong.fit_attribute_normalization(&data).is_err());
        wrong.attribute_scale = vec![1.0];
        assert!(wrong.validate().is_err());
    }
}
