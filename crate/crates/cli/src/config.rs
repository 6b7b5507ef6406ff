//! Run configuration: protocol defaults, overridden by a flat
//! `key = value` config file with `[section]` headers, overridden in turn by
//! command-line flags. Unknown file keys are errors.

use ssdbn::error::{Error, Result};
use ssdbn::protocol;
use ssdbn::train::{default_layer_algorithms, Algorithm, DbnSpec, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    // [data]
    pub target_size: usize,
    pub texture_name: Option<String>,
    // [model]
    pub patch: usize,
    pub kernel: usize,
    pub tilings: usize,
    pub filters: usize,
    pub layers: usize,
    pub upper_filters: Vec<usize>,
    pub upper_kernel: usize,
    pub bias_shift: bool,
    // [train]
    pub algorithms: Option<Vec<Algorithm>>,
    pub gibbs_steps: usize,
    pub learning_rate: f64,
    pub lr_decay_start: u64,
    pub momentum: f64,
    pub minibatch: usize,
    pub n_chains: usize,
    pub restart_prob: f64,
    pub fast_rate: Option<f64>,
    pub fast_decay: f64,
    pub updates: u64,
    pub seed: u64,
    // [sample]
    pub sample_count: usize,
    pub sample_size: usize,
    pub burn_in: usize,
    pub thin: usize,
    // [inpaint]
    pub inpaint_frame: usize,
    pub inpaint_center: usize,
    pub inpaint_iters: usize,
    pub inpaint_frames: usize,
    pub inpaint_seeds: usize,
    // [eval]
    pub tss_patch: usize,
    // [mixing]
    pub mixing_length: usize,
    pub mixing_burn_in: usize,
    pub mixing_max_lag: usize,
    pub mixing_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target_size: protocol::RESCALE_SMALL,
            texture_name: None,
            patch: protocol::PATCH_SIZE,
            kernel: protocol::KERNEL_SIZE,
            tilings: protocol::NUM_TILINGS,
            filters: protocol::FILTERS_PER_TILING,
            layers: 1,
            upper_filters: vec![protocol::UPPER_FILTERS, protocol::UPPER_FILTERS],
            upper_kernel: protocol::UPPER_KERNEL,
            bias_shift: true,
            algorithms: None,
            gibbs_steps: 1,
            learning_rate: 1e-3,
            lr_decay_start: 0,
            momentum: 0.0,
            minibatch: protocol::MINIBATCH,
            n_chains: protocol::N_CHAINS,
            restart_prob: protocol::RESTART_PROB,
            fast_rate: None,
            fast_decay: protocol::FAST_DECAY,
            updates: 10_000,
            seed: 42,
            sample_count: protocol::SAMPLE_COUNT,
            sample_size: protocol::SAMPLE_SIZE,
            burn_in: protocol::SAMPLE_BURN_IN,
            thin: protocol::SAMPLE_THIN,
            inpaint_frame: protocol::INPAINT_FRAME,
            inpaint_center: protocol::INPAINT_CENTER,
            inpaint_iters: protocol::INPAINT_ITERS,
            inpaint_frames: protocol::INPAINT_FRAMES,
            inpaint_seeds: protocol::INPAINT_SEEDS,
            tss_patch: protocol::TSS_PATCH,
            mixing_length: 300,
            mixing_burn_in: 500,
            mixing_max_lag: 100,
            mixing_size: protocol::SAMPLE_SIZE,
        }
    }
}

impl RunConfig {
    /// Parse a flat config file and overlay it on the defaults.
    pub fn from_file(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_lowercase();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected `key = value`, got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_lowercase();
            let value = value.trim();
            self.set(&section, &key, value).map_err(|e| {
                Error::config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        self.validate()
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value '{value}' for {key}")))
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        match full.as_str() {
            "data.target_size" => self.target_size = num(&full, value)?,
            "data.name" => self.texture_name = Some(value.to_string()),
            "model.patch" => self.patch = num(&full, value)?,
            "model.kernel" => self.kernel = num(&full, value)?,
            "model.tilings" => self.tilings = num(&full, value)?,
            "model.filters" => self.filters = num(&full, value)?,
            "model.layers" => self.layers = num(&full, value)?,
            "model.upper_filters" => {
                self.upper_filters = value
                    .split(',')
                    .map(|v| num("model.upper_filters", v.trim()))
                    .collect::<Result<_>>()?;
            }
            "model.upper_kernel" => self.upper_kernel = num(&full, value)?,
            "model.bias_shift" => self.bias_shift = num(&full, value)?,
            "train.algorithm" | "train.algorithms" => {
                self.algorithms = Some(
                    value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<Result<_>>()?,
                );
            }
            "train.k" | "train.gibbs_steps" => self.gibbs_steps = num(&full, value)?,
            "train.learning_rate" => self.learning_rate = num(&full, value)?,
            "train.lr_decay_start" => self.lr_decay_start = num(&full, value)?,
            "train.momentum" => self.momentum = num(&full, value)?,
            "train.minibatch" => self.minibatch = num(&full, value)?,
            "train.n_chains" => self.n_chains = num(&full, value)?,
            "train.restart_prob" => self.restart_prob = num(&full, value)?,
            "train.fast_rate" => self.fast_rate = Some(num(&full, value)?),
            "train.fast_decay" => self.fast_decay = num(&full, value)?,
            "train.updates" => self.updates = num(&full, value)?,
            "train.seed" => self.seed = num(&full, value)?,
            "sample.count" => self.sample_count = num(&full, value)?,
            "sample.size" => self.sample_size = num(&full, value)?,
            "sample.burn_in" => self.burn_in = num(&full, value)?,
            "sample.thin" => self.thin = num(&full, value)?,
            "inpaint.frame" => self.inpaint_frame = num(&full, value)?,
            "inpaint.center" => self.inpaint_center = num(&full, value)?,
            "inpaint.iters" => self.inpaint_iters = num(&full, value)?,
            "inpaint.frames" => self.inpaint_frames = num(&full, value)?,
            "inpaint.seeds" => self.inpaint_seeds = num(&full, value)?,
            "eval.tss_patch" => self.tss_patch = num(&full, value)?,
            "mixing.length" => self.mixing_length = num(&full, value)?,
            "mixing.burn_in" => self.mixing_burn_in = num(&full, value)?,
            "mixing.max_lag" => self.mixing_max_lag = num(&full, value)?,
            "mixing.size" => self.mixing_size = num(&full, value)?,
            _ => return Err(Error::config(format!("unknown key '{full}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(Algorithm::Fpcd).validate()?;
        if self.layers == 0 || self.layers > 3 {
            return Err(Error::config("model.layers must be 1..=3"));
        }
        if let Some(algs) = &self.algorithms {
            if algs.len() != 1 && algs.len() != self.layers {
                return Err(Error::config(
                    "train.algorithms must list one entry or one per layer",
                ));
            }
        }
        Ok(())
    }

    pub fn dbn_spec(&self) -> DbnSpec {
        DbnSpec {
            patch: self.patch,
            kernel: self.kernel,
            tilings: self.tilings,
            filters: self.filters,
            layers: self.layers,
            upper_filters: self.upper_filters.clone(),
            upper_kernel: self.upper_kernel,
            bias_shift: self.bias_shift,
        }
    }

    fn train_config(&self, algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm,
            gibbs_steps: self.gibbs_steps,
            learning_rate: self.learning_rate,
            lr_decay_start: self.lr_decay_start,
            momentum: self.momentum,
            minibatch: self.minibatch,
            n_chains: self.n_chains,
            restart_prob: self.restart_prob,
            fast_rate: self.fast_rate,
            fast_decay: self.fast_decay,
            updates: self.updates,
            seed: self.seed,
        }
    }

    /// Per-layer training configs: explicit algorithm list when given,
    /// otherwise the layer-wise defaults (FPCD alone, CD below PCD on top).
    pub fn layer_configs(&self) -> Result<Vec<TrainConfig>> {
        let algorithms = match &self.algorithms {
            Some(list) if list.len() == 1 => vec![list[0]; self.layers],
            Some(list) => list.clone(),
            None => default_layer_algorithms(self.layers),
        };
        if algorithms.len() != self.layers {
            return Err(Error::config("algorithm list does not match layers"));
        }
        Ok(algorithms
            .into_iter()
            .map(|a| self.train_config(a))
            .collect())
    }
}
