//! Flat `key=value` run configuration.
//!
//! Resolution order: built-in defaults, then the `--config` file, then
//! command-line overrides. The resolved form lists every key.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use madan::datagen::SuiteConfig;
use madan::trainer::TrainConfig;

const DATA_SEED: &str = "data.seed";
const DATA_SHIFTS: &str = "data.source_shifts";
const DATA_TARGET_SHIFT: &str = "data.target_shift";
const DATA_N: &str = "data.n_per_domain";
const DATA_N_TEST: &str = "data.n_test";
const DATA_HEIGHT: &str = "data.height";
const DATA_WIDTH: &str = "data.width";

/// Shift range the default source shifts are spread over.
const DEFAULT_SHIFT_RANGE: (f64, f64) = (0.4, 0.8);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: SuiteConfig,
}

/// Evenly spaced shifts across [`DEFAULT_SHIFT_RANGE`].
pub fn default_source_shifts(m: usize) -> Vec<f64> {
    let (lo, hi) = DEFAULT_SHIFT_RANGE;
    match m {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect(),
    }
}

fn data_entries(d: &SuiteConfig) -> Vec<(String, String)> {
    let shifts = d.source_shifts.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    vec![
        (DATA_SEED.into(), d.seed.to_string()),
        (DATA_SHIFTS.into(), shifts),
        (DATA_TARGET_SHIFT.into(), d.target_shift.to_string()),
        (DATA_N.into(), d.n_per_domain.to_string()),
        (DATA_N_TEST.into(), d.n_test.to_string()),
        (DATA_HEIGHT.into(), d.height.to_string()),
        (DATA_WIDTH.into(), d.width.to_string()),
    ]
}

impl RunConfig {
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut v = self.train.entries();
        v.extend(data_entries(&self.data));
        v
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Resolves defaults, an optional config file and `overrides`, in that
    /// order. Unknown keys are errors.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut values: BTreeMap<String, String> = Self::default().entries().into_iter().collect();
        let mut explicit = BTreeSet::new();
        let mut set = |k: &str, v: &str, origin: &str| -> Result<()> {
            let k = k.trim();
            match values.get_mut(k) {
                Some(slot) => {
                    *slot = v.trim().to_string();
                    explicit.insert(k.to_string());
                    Ok(())
                }
                None => bail!("unknown config key `{k}` ({origin})"),
            }
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let origin = format!("{}:{}", path.display(), lineno + 1);
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{origin}: expected key=value, got `{line}`"))?;
                set(k, v, &origin)?;
            }
        }
        for (k, v) in overrides {
            set(k, v, "command line")?;
        }
        let sources: usize = parse("model.sources", &values["model.sources"])?;
        if !explicit.contains(DATA_SHIFTS) {
            let shifts = default_source_shifts(sources);
            values.insert(
                DATA_SHIFTS.into(),
                shifts.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            );
        }
        let train = TrainConfig::from_lookup(|k| values.get(k).cloned()).context("invalid training configuration")?;
        let shifts = values[DATA_SHIFTS]
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse::<f64>(DATA_SHIFTS, s))
            .collect::<Result<Vec<_>>>()?;
        if shifts.len() != sources {
            bail!("{DATA_SHIFTS} lists {} shifts for {sources} sources", shifts.len());
        }
        let data = SuiteConfig {
            seed: parse(DATA_SEED, &values[DATA_SEED])?,
            source_shifts: shifts,
            target_shift: parse(DATA_TARGET_SHIFT, &values[DATA_TARGET_SHIFT])?,
            n_per_domain: parse(DATA_N, &values[DATA_N])?,
            n_test: parse(DATA_N_TEST, &values[DATA_N_TEST])?,
            height: parse(DATA_HEIGHT, &values[DATA_HEIGHT])?,
            width: parse(DATA_WIDTH, &values[DATA_WIDTH])?,
        };
        Ok(Self { train, data })
    }
}

fn parse<V: std::str::FromStr>(key: &str, s: &str) -> Result<V> {
    s.trim()
        .parse()
        .ok()
        .with_context(|| format!("config key {key}: cannot parse `{s}`"))
}

/// Splits `key=value` from a `--set` argument.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => bail!("expected key=value, got `{s}`"),
    }
}
