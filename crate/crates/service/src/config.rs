use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use refeednet::datasets::Domain;
use refeednet::refeed::{DEFAULT_MAX_ROUNDS, DEFAULT_Q};
use refeednet::{Error, Result};

/// Environment variable naming the data directory when no flag is given.
pub const DATA_ENV: &str = "REFEEDNET_DATA";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub q: f64,
    /// Start a retraining cycle after every N corrections.
    pub auto_cycle_every: Option<usize>,
    /// Consecutive cycles ending below `q` after which automatic cycles pause.
    pub max_rounds: usize,
    /// Bearer token required on every endpoint except `/ui/` when set.
    pub token: Option<String>,
    /// Static bundle served under `/ui/`; defaults to `<data_dir>/ui`.
    pub ui_dir: Option<PathBuf>,
    pub seed: u64,
    /// Distribution used to generate a retest corpus when none exists.
    pub retest_domain: Domain,
    pub retest_per_class: usize,
    pub training_capacity: usize,
    pub prediction_capacity: usize,
    /// Stamp records with wall-clock time; off gives reproducible files.
    pub timestamps: bool,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: data_dir.into(),
            q: DEFAULT_Q,
            auto_cycle_every: None,
            max_rounds: DEFAULT_MAX_ROUNDS,
            token: None,
            ui_dir: None,
            seed: 0,
            retest_domain: Domain::Shifted,
            retest_per_class: 48,
            training_capacity: 40,
            prediction_capacity: 1000,
            timestamps: true,
        }
    }

    /// The flag value if given, else `$REFEEDNET_DATA`, else `./refeednet-data`.
    pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("refeednet-data"))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::Range(format!("q must lie in [0, 1], got {}", self.q)));
        }
        if self.auto_cycle_every == Some(0) {
            return Err(Error::InvalidConfig("auto_cycle_every must be >= 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidConfig("max_rounds must be >= 1".into()));
        }
        if self.training_capacity == 0 || self.prediction_capacity == 0 {
            return Err(Error::InvalidConfig("stack capacities must be >= 1".into()));
        }
        if self.retest_per_class == 0 {
            return Err(Error::InvalidConfig("retest_per_class must be >= 1".into()));
        }
        Ok(())
    }

    pub fn ui_dir(&self) -> PathBuf {
        self.ui_dir.clone().unwrap_or_else(|| self.data_dir.join("ui"))
    }
}
