//! Scenario configuration.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;
use vqp_core::config::ConfigError;
use vqp_core::CostModel;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Scenario(String),
    #[error("unknown baseline `{0}` (expected k, v or l)")]
    Baseline(String),
    #[error("unknown mode `{0}` (expected sync or async)")]
    Mode(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cost(#[from] ConfigError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scenario {
    SingleConnect,
    FullMesh,
    DataPath,
    PoolSweep,
    TailLatency,
    LoadSpike,
    MemoryModel,
    TransferDemo,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::SingleConnect,
        Scenario::FullMesh,
        Scenario::DataPath,
        Scenario::PoolSweep,
        Scenario::TailLatency,
        Scenario::LoadSpike,
        Scenario::MemoryModel,
        Scenario::TransferDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SingleConnect => "single_connect",
            Scenario::FullMesh => "full_mesh",
            Scenario::DataPath => "data_path",
            Scenario::PoolSweep => "pool_sweep",
            Scenario::TailLatency => "tail_latency",
            Scenario::LoadSpike => "load_spike",
            Scenario::MemoryModel => "memory_model",
            Scenario::TransferDemo => "transfer_demo",
        }
    }

    /// (clients, servers, payload) used when the command line leaves them out.
    pub fn defaults(self) -> (u64, u64, u64) {
        match self {
            Scenario::SingleConnect => (1, 1, 0),
            Scenario::FullMesh => (240, 0, 0),
            Scenario::DataPath => (1, 1, 8),
            Scenario::PoolSweep => (1, 10, 8),
            Scenario::TailLatency => (50, 5, 8),
            Scenario::LoadSpike => (180, 8, 64),
            Scenario::MemoryModel => (5000, 1, 0),
            Scenario::TransferDemo => (1, 1, 8),
        }
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ScenarioError::Scenario(s.to_string()))
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Baseline {
    Krcore,
    Verbs,
    Lite,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Krcore, Baseline::Verbs, Baseline::Lite];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Krcore => "krcore",
            Baseline::Verbs => "verbs",
            Baseline::Lite => "lite",
        }
    }
}

impl FromStr for Baseline {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k" | "krcore" => Ok(Baseline::Krcore),
            "v" | "verbs" => Ok(Baseline::Verbs),
            "l" | "lite" => Ok(Baseline::Lite),
            _ => Err(ScenarioError::Baseline(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sync,
    Async,
}

impl FromStr for Mode {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            _ => Err(ScenarioError::Mode(s.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub mode: Mode,
    pub clients: u64,
    pub servers: u64,
    pub payload: u64,
    pub baseline: Baseline,
    pub preset: String,
    pub seed: u64,
    pub cost: CostModel,
    /// Load spike: serialized cost of starting one worker process.
    pub process_start_ns: u64,
}

/// Load-spike calibration: 180 workers ≈ 244ms of process creation.
pub const PROCESS_START_NS: u64 = 1_350_000;

impl ScenarioConfig {
    pub fn new(scenario: Scenario, baseline: Baseline, preset: &str) -> Result<Self, ScenarioError> {
        let (clients, servers, payload) = scenario.defaults();
        Ok(Self {
            scenario,
            mode: Mode::Sync,
            clients,
            servers,
            payload,
            baseline,
            preset: preset.to_string(),
            seed: 1,
            cost: CostModel::preset(preset)?,
            process_start_ns: PROCESS_START_NS,
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.cost.validate()?;
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        match self.scenario {
            Scenario::MemoryModel => {}
            Scenario::FullMesh if self.clients < 2 => return bad("full_mesh needs at least 2 workers"),
            _ if self.clients == 0 => return bad("clients must be positive"),
            _ => {}
        }
        let needs_servers = !matches!(self.scenario, Scenario::FullMesh | Scenario::MemoryModel);
        if needs_servers && self.servers == 0 {
            return bad("servers must be positive");
        }
        if self.payload > u32::MAX as u64 {
            return bad("payload must fit in 32 bits");
        }
        if self.clients > 100_000 || self.servers > 1_000 {
            return bad("cluster too large for one simulation");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        for b in Baseline::ALL {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
        }
        assert_eq!("v".parse::<Baseline>().unwrap(), Baseline::Verbs);
        assert!("x".parse::<Baseline>().is_err());
        assert!("mesh".parse::<Scenario>().is_err());
    }

    #[test]
    fn validation() {
        let mut c = ScenarioConfig::new(Scenario::DataPath, Baseline::Krcore, "fig3b").unwrap();
        c.validate().unwrap();
        c.servers = 0;
        assert!(c.validate().is_err());
        let mut m = ScenarioConfig::new(Scenario::FullMesh, Baseline::Verbs, "default").unwrap();
        m.clients = 1;
        assert!(m.validate().is_err());
        assert!(ScenarioConfig::new(Scenario::FullMesh, Baseline::Verbs, "nope").is_err());
    }
}
