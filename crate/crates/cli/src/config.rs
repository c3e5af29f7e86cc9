//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sdbnn::autograd::SteKind;
use sdbnn::binarize::AsdForm;
use sdbnn::data::{AugmentConfig, DatasetKind, Normalization};
use sdbnn::models::{AsdPolicy, BinaryPolicy, ModelSpec, PresetOptions};
use sdbnn::trainer::OptimConfig;
use sdbnn::{Error, Result};

/// Keys understood besides the optimizer block, with their meaning.
pub const RUN_KEYS: [(&str, &str); 19] = [
    ("name", "run name; outputs go to <out_dir>/<name>"),
    ("out_dir", "parent directory of run directories"),
    ("preset", "model preset: lenet, vgg_small_lite, resnet20, pixel, twoblock"),
    ("full_width", "on|off: vgg_small_lite with original widths"),
    ("shortcuts", "bireal|block: resnet20 shortcut placement"),
    ("dataset", "mnist|cifar10"),
    ("data_root", "dataset root; falls back to --data-root, SDBNN_DATA, /root/data"),
    ("train_limit", "use only the first N training items (0 = all)"),
    ("test_limit", "use only the first N test items (0 = all)"),
    ("asd", "static activation shift: off|original|tanh|sigmoid"),
    ("dasd", "on|off: per-sample activation shift from a small head (overrides asd)"),
    ("re", "reduction ratio of the dasd head"),
    ("wsd", "on|off: weight shift"),
    ("scale", "on|off: multiplicative scaling baseline instead of shifts"),
    ("ste", "clip|approxsign"),
    ("augment", "standard|none (standard is crop+flip for cifar10, nothing for mnist)"),
    ("eval_batch_size", "batch size for evaluation"),
    ("norm_mean", "per-channel input mean; computed from the training split when empty"),
    ("norm_std", "per-channel input std; computed from the training split when empty"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub preset: String,
    pub full_width: bool,
    pub bireal_shortcuts: bool,
    pub dataset: DatasetKind,
    pub data_root: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
    pub asd: Option<AsdForm>,
    pub dasd: bool,
    pub re: usize,
    pub wsd: bool,
    pub scale: bool,
    pub ste: SteKind,
    pub augment: bool,
    pub eval_batch_size: usize,
    pub norm: Option<Normalization>,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            out_dir: PathBuf::from("runs"),
            preset: "lenet".into(),
            full_width: false,
            bireal_shortcuts: true,
            dataset: DatasetKind::Mnist,
            data_root: None,
            train_limit: 0,
            test_limit: 0,
            asd: Some(AsdForm::Sigmoid),
            dasd: false,
            re: 16,
            wsd: true,
            scale: false,
            ste: SteKind::ClipSte,
            augment: true,
            eval_batch_size: 256,
            norm: None,
            optim: OptimConfig::default(),
        }
    }
}

fn on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("{key} must be on or off, got {v:?}"))),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        RUN_KEYS.iter().any(|(k, _)| *k == key) || OptimConfig::KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        let usize_of = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(bad());
                }
                self.name = value.into()
            }
            "out_dir" => self.out_dir = value.into(),
            "preset" => self.preset = value.into(),
            "full_width" => self.full_width = on_off(key, value)?,
            "shortcuts" => {
                self.bireal_shortcuts = match value {
                    "bireal" => true,
                    "block" => false,
                    _ => return Err(bad()),
                }
            }
            "dataset" => self.dataset = value.parse()?,
            "data_root" => self.data_root = (!value.is_empty()).then(|| value.into()),
            "train_limit" => self.train_limit = usize_of()?,
            "test_limit" => self.test_limit = usize_of()?,
            "asd" => self.asd = if value == "off" { None } else { Some(value.parse()?) },
            "dasd" => self.dasd = on_off(key, value)?,
            "re" => {
                self.re = usize_of()?;
                if self.re == 0 {
                    return Err(bad());
                }
            }
            "wsd" => self.wsd = on_off(key, value)?,
            "scale" => self.scale = on_off(key, value)?,
            "ste" => self.ste = value.parse()?,
            "augment" => {
                self.augment = match value {
                    "standard" => true,
                    "none" => false,
                    _ => return Err(bad()),
                }
            }
            "eval_batch_size" => {
                self.eval_batch_size = usize_of()?;
                if self.eval_batch_size == 0 {
                    return Err(bad());
                }
            }
            "norm_mean" | "norm_std" => {
                let vals = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|t| t.trim().parse::<f32>().map_err(|_| bad())).collect::<Result<_>>()?
                };
                let n = self.norm.get_or_insert(Normalization { mean: Vec::new(), std: Vec::new() });
                if key == "norm_mean" {
                    n.mean = vals;
                } else {
                    n.std = vals;
                }
                if n.mean.is_empty() && n.std.is_empty() {
                    self.norm = None;
                }
            }
            _ if OptimConfig::KEYS.contains(&key) => self.optim.set(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if let Some(n) = &self.norm {
            if n.mean.len() != n.std.len() || n.mean.is_empty() || n.std.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Config("norm_mean and norm_std need matching non-empty lists with std > 0".into()));
            }
        }
        let spec = self.spec()?;
        let want = self.dataset.image_shape();
        if spec.input != want {
            return Err(Error::Config(format!(
                "preset {} takes {:?} inputs but {} images are {want:?}",
                self.preset, spec.input, self.dataset
            )));
        }
        Ok(())
    }

    pub fn policy(&self) -> BinaryPolicy {
        let asd = if self.dasd {
            AsdPolicy::Dynamic { re: self.re }
        } else {
            match self.asd {
                Some(form) => AsdPolicy::Static(form),
                None => AsdPolicy::Off,
            }
        };
        BinaryPolicy { asd, wsd: self.wsd, scale: self.scale, ste: self.ste }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let opts = PresetOptions {
            policy: self.policy(),
            full_width: self.full_width,
            bireal_shortcuts: self.bireal_shortcuts,
        };
        ModelSpec::preset(&self.preset, &opts)
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if self.augment {
            AugmentConfig::standard(self.dataset)
        } else {
            AugmentConfig::NONE
        }
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let (mean, std) = self.norm.as_ref().map(Normalization::to_strings).unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("name", self.name.clone());
        put("out_dir", self.out_dir.display().to_string());
        put("preset", self.preset.clone());
        put("full_width", flag(self.full_width).into());
        put("shortcuts", if self.bireal_shortcuts { "bireal" } else { "block" }.into());
        put("dataset", self.dataset.to_string());
        put("data_root", self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("train_limit", self.train_limit.to_string());
        put("test_limit", self.test_limit.to_string());
        put("asd", self.asd.map(|f| f.to_string()).unwrap_or_else(|| "off".into()));
        put("dasd", flag(self.dasd).into());
        put("re", self.re.to_string());
        put("wsd", flag(self.wsd).into());
        put("scale", flag(self.scale).into());
        put("ste", self.ste.as_str().into());
        put("augment", if self.augment { "standard" } else { "none" }.into());
        put("eval_batch_size", self.eval_batch_size.to_string());
        put("norm_mean", mean);
        put("norm_std", std);
        for (k, v) in self.optim.pairs() {
            put(k, v);
        }
        s
    }
}

/// Parses `--sweep key=v1,v2,...` into its key and values.
pub fn parse_sweep(arg: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = arg.split_once('=').ok_or_else(|| Error::Config(format!("sweep {arg:?} is not key=v1,v2")))?;
    if !RunConfig::is_key(k) {
        return Err(Error::Config(format!("unknown sweep key {k:?}")));
    }
    let values: Vec<String> = vs.split(',').filter(|v| !v.is_empty()).map(str::to_string).collect();
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over {k} has no values")));
    }
    Ok((k.to_string(), values))
}

/// Cartesian product of the sweeps, as lists of (key, value) assignments,
/// in order with the last sweep varying fastest.
pub fn sweep_grid(sweeps: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut grid: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, values) in sweeps {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((k.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    grid
}
