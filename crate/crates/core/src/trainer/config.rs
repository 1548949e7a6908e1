//! Run configuration: a flat `key = value` text format shared by config
//! files, command-line overrides and the snapshot written into every run
//! directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::decoders::DecoderKind;
use crate::envs::{EnumerableMdp, EnvConfig, POINT_HORIZON};
use crate::error::{Error, Result};

pub const DEFAULT_PATHS: usize = 100;
pub const PAPER_PATHS: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.86;
pub const DEFAULT_BETA: f64 = 1e-3;
pub const CHAIN_STATES: usize = 5;
pub const CHAIN_HORIZON: usize = 8;
pub const DEFAULT_EMBED_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Valor,
    ValorStates,
    Vic,
    Diayn,
    RandomReward,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Valor => "valor",
            Algo::ValorStates => "valor_states",
            Algo::Vic => "vic",
            Algo::Diayn => "diayn",
            Algo::RandomReward => "random_reward",
        }
    }

    /// `None` for the random-reward baseline, which has no decoder.
    pub fn decoder(self) -> Option<DecoderKind> {
        match self {
            Algo::Valor => Some(DecoderKind::Valor),
            Algo::ValorStates => Some(DecoderKind::ValorStates),
            Algo::Vic => Some(DecoderKind::Vic),
            Algo::Diayn => Some(DecoderKind::Diayn),
            Algo::RandomReward => None,
        }
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valor" => Ok(Algo::Valor),
            "valor_states" => Ok(Algo::ValorStates),
            "vic" => Ok(Algo::Vic),
            "diayn" => Ok(Algo::Diayn),
            "random_reward" => Ok(Algo::RandomReward),
            other => Err(Error::Config(format!(
                "unknown algo `{other}` (expected valor, valor_states, vic, diayn or random_reward)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvName {
    Point2d,
    Chain,
}

impl EnvName {
    pub fn name(self) -> &'static str {
        match self {
            EnvName::Point2d => "point2d",
            EnvName::Chain => "chain",
        }
    }

    pub fn default_horizon(self) -> usize {
        match self {
            EnvName::Point2d => POINT_HORIZON,
            EnvName::Chain => CHAIN_HORIZON,
        }
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point2d" => Ok(EnvName::Point2d),
            "chain" => Ok(EnvName::Chain),
            other => Err(Error::Config(format!(
                "unknown env `{other}` (expected point2d or chain)"
            ))),
        }
    }
}

/// How many contexts are active over a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextSchedule {
    Fixed { k: usize },
    Curriculum { k_init: usize, k_max: usize },
}

impl ContextSchedule {
    pub fn k_initial(&self) -> usize {
        match *self {
            ContextSchedule::Fixed { k } => k,
            ContextSchedule::Curriculum { k_init, .. } => k_init,
        }
    }

    pub fn k_max(&self) -> usize {
        match *self {
            ContextSchedule::Fixed { k } => k,
            ContextSchedule::Curriculum { k_max, .. } => k_max,
        }
    }

    pub fn is_curriculum(&self) -> bool {
        matches!(self, ContextSchedule::Curriculum { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub algo: Algo,
    pub env: EnvName,
    pub horizon: usize,
    pub paths_per_epoch: usize,
    pub gamma: f64,
    pub beta: f64,
    pub lr: f64,
    pub contexts: ContextSchedule,
    /// Learned context embeddings (`Some(dim)`) or one-hot conditioning
    /// (`None`, the default).
    pub embed_dim: Option<usize>,
    pub threshold: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Write checkpoints every this many epochs (0: only at exit).
    pub checkpoint_every: usize,
    /// End the run at the first epoch with `mean_pd >= threshold` while
    /// all `K_max` contexts are active.
    pub stop_at_mastery: bool,
    /// Record real elapsed time in `wall_ms`; off by default so metric
    /// files stay byte-reproducible.
    pub wall_clock: bool,
}

impl TrainerConfig {
    /// Desk-scale defaults for an algorithm.
    pub fn new(algo: Algo) -> Self {
        TrainerConfig {
            algo,
            env: EnvName::Point2d,
            horizon: POINT_HORIZON,
            paths_per_epoch: DEFAULT_PATHS,
            gamma: 0.97,
            beta: if algo == Algo::Vic { 0.0 } else { DEFAULT_BETA },
            lr: 1e-3,
            contexts: ContextSchedule::Fixed { k: 8 },
            embed_dim: None,
            threshold: DEFAULT_THRESHOLD,
            epochs: 1500,
            seed: 0,
            checkpoint_every: 100,
            stop_at_mastery: false,
            wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be a finite value >= 0, got {}", self.beta));
        }
        if self.algo == Algo::Vic && self.beta != 0.0 {
            return bad(format!("vic has no entropy bonus: beta must be 0, got {}", self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold must lie in (0, 1], got {}", self.threshold));
        }
        if self.paths_per_epoch == 0 {
            return bad("paths must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.embed_dim == Some(0) {
            return bad("embed_dim must be at least 1".into());
        }
        match self.contexts {
            ContextSchedule::Fixed { k: 0 } => return bad("K must be at least 1".into()),
            ContextSchedule::Curriculum { k_init, k_max } if k_init == 0 || k_init > k_max => {
                return bad(format!(
                    "curriculum needs 1 <= K_init <= K_max, got {k_init} and {k_max}"
                ))
            }
            _ => {}
        }
        if self.algo == Algo::RandomReward && (self.contexts.is_curriculum() || self.stop_at_mastery) {
            return bad("random_reward has no decoder, so curriculum and stop_at_mastery are unavailable".into());
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        match self.env {
            EnvName::Point2d => EnvConfig::Point {
                horizon: self.horizon,
                wall_penalty: 0.0,
            },
            EnvName::Chain => EnvConfig::Chain(EnumerableMdp::line(CHAIN_STATES, self.horizon)),
        }
    }

    /// Build from parsed `key = value` pairs. Keys not present keep their
    /// defaults; unknown keys and contradictory combinations are errors.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "algo",
            "env",
            "horizon",
            "paths",
            "gamma",
            "beta",
            "lr",
            "K",
            "K_init",
            "K_max",
            "curriculum",
            "embed",
            "embed_dim",
            "threshold",
            "epochs",
            "seed",
            "checkpoint_every",
            "stop_at_mastery",
            "wall_clock",
        ];
        if let Some(k) = map.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let algo: Algo = map.get("algo").map_or(Ok(Algo::Valor), |s| s.parse())?;
        let mut c = TrainerConfig::new(algo);
        if let Some(v) = map.get("env") {
            c.env = v.parse()?;
            c.horizon = c.env.default_horizon();
        }
        set(map, "horizon", &mut c.horizon)?;
        set(map, "paths", &mut c.paths_per_epoch)?;
        set(map, "gamma", &mut c.gamma)?;
        set(map, "beta", &mut c.beta)?;
        set(map, "lr", &mut c.lr)?;
        set(map, "threshold", &mut c.threshold)?;
        set(map, "epochs", &mut c.epochs)?;
        set(map, "seed", &mut c.seed)?;
        set(map, "checkpoint_every", &mut c.checkpoint_every)?;
        set(map, "stop_at_mastery", &mut c.stop_at_mastery)?;
        set(map, "wall_clock", &mut c.wall_clock)?;

        let mut embed = false;
        set(map, "embed", &mut embed)?;
        let mut dim = DEFAULT_EMBED_DIM;
        set(map, "embed_dim", &mut dim)?;
        if !embed && map.contains_key("embed_dim") {
            return Err(Error::Config("embed_dim given with embed = false".into()));
        }
        c.embed_dim = embed.then_some(dim);

        let mut curriculum = false;
        set(map, "curriculum", &mut curriculum)?;
        c.contexts = if curriculum {
            if map.contains_key("K") {
                return Err(Error::Config(
                    "K fixes the context count; with curriculum use K_init and K_max".into(),
                ));
            }
            let Some(k_max) = map.get("K_max") else {
                return Err(Error::Config("curriculum requires K_max".into()));
            };
            let k_max = parse_value("K_max", k_max)?;
            let mut k_init = 2.min(k_max);
            set(map, "K_init", &mut k_init)?;
            ContextSchedule::Curriculum { k_init, k_max }
        } else {
            if map.contains_key("K_max") || map.contains_key("K_init") {
                return Err(Error::Config("K_max and K_init only apply with curriculum".into()));
            }
            let mut k = 8;
            set(map, "K", &mut k)?;
            ContextSchedule::Fixed { k }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&parse_flat(text)?)
    }

    /// Canonical flat form; `parse(to_flat())` round-trips.
    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("algo", self.algo.name().into());
        kv("env", self.env.name().into());
        kv("horizon", self.horizon.to_string());
        kv("paths", self.paths_per_epoch.to_string());
        kv("gamma", self.gamma.to_string());
        kv("beta", self.beta.to_string());
        kv("lr", self.lr.to_string());
        match self.contexts {
            ContextSchedule::Fixed { k } => {
                kv("curriculum", "false".into());
                kv("K", k.to_string());
            }
            ContextSchedule::Curriculum { k_init, k_max } => {
                kv("curriculum", "true".into());
                kv("K_init", k_init.to_string());
                kv("K_max", k_max.to_string());
            }
        }
        kv("embed", self.embed_dim.is_some().to_string());
        if let Some(d) = self.embed_dim {
            kv("embed_dim", d.to_string());
        }
        kv("threshold", self.threshold.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("stop_at_mastery", self.stop_at_mastery.to_string());
        kv("wall_clock", self.wall_clock.to_string());
        s
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{raw}` for key `{key}`")))
}

fn set<T: FromStr>(map: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
    if let Some(raw) = map.get(key) {
        *slot = parse_value(key, raw)?;
    }
    Ok(())
}

/// Parse `key = value` lines. Blank lines and `#` comments are ignored;
/// a repeated key is an error.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` repeated", n + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vic_defaults_to_zero_beta_and_rejects_positive() {
        let c = TrainerConfig::parse("algo = vic").unwrap();
        assert_eq!(c.beta, 0.0);
        assert!(TrainerConfig::parse("algo = vic\nbeta = 0.01").is_err());
        assert!(TrainerConfig::parse("algo = vic\nbeta = 0").is_ok());
    }

    #[test]
    fn schedule_conflicts() {
        assert!(TrainerConfig::parse("curriculum = true\nK = 8\nK_max = 16").is_err());
        assert!(TrainerConfig::parse("curriculum = true").is_err());
        assert!(TrainerConfig::parse("K_max = 16").is_err());
        let c = TrainerConfig::parse("curriculum = true\nK_max = 16").unwrap();
        assert_eq!(c.contexts, ContextSchedule::Curriculum { k_init: 2, k_max: 16 });
    }

    #[test]
    fn bad_values() {
        for text in [
            "gamma = 0",
            "gamma = 1.5",
            "beta = -1",
            "paths = 0",
            "K = 0",
            "bogus = 1",
            "epochs = x",
        ] {
            assert!(TrainerConfig::parse(text).is_err(), "{text}");
        }
        assert!(parse_flat("a = 1\na = 2").is_err());
        assert!(parse_flat("novalue").is_err());
    }

    #[test]
    fn flat_round_trip() {
        let text = "algo = diayn\nenv = chain\ncurriculum = true\nK_max = 5\nembed = false\nseed = 7 # note\n\nwall_clock = true";
        let c = TrainerConfig::parse(text).unwrap();
        assert_eq!(c.horizon, CHAIN_HORIZON);
        assert_eq!(TrainerConfig::parse(&c.to_flat()).unwrap(), c);
        let d = TrainerConfig::new(Algo::Valor);
        assert_eq!(TrainerConfig::parse(&d.to_flat()).unwrap(), d);
    }
}
