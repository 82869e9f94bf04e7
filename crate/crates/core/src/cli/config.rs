use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cli::experiments::{mnist_gas, toy_gas, MnistConfig, ToyConfig};
use crate::distill::{GasConfig, Mode};
use crate::error::{Error, Result};
use crate::rlteacher::PpoConfig;
use crate::tasks::EnvKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainTeacher,
    Distill,
    Evaluate,
    Gradcheck,
    ExpFig1,
    ExpModes,
    ExpMnist,
    ExpCartpole,
    ExpMountaincar,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::TrainTeacher,
        Command::Distill,
        Command::Evaluate,
        Command::Gradcheck,
        Command::ExpFig1,
        Command::ExpModes,
        Command::ExpMnist,
        Command::ExpCartpole,
        Command::ExpMountaincar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::Evaluate => "evaluate",
            Command::Gradcheck => "gradcheck",
            Command::ExpFig1 => "exp-fig1",
            Command::ExpModes => "exp-modes",
            Command::ExpMnist => "exp-mnist",
            Command::ExpCartpole => "exp-cartpole",
            Command::ExpMountaincar => "exp-mountaincar",
        }
    }

    pub fn parse(s: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == s)
    }

    /// The environment a command is tied to, if any.
    fn fixed_env(self) -> Option<EnvKind> {
        match self {
            Command::ExpCartpole => Some(EnvKind::CartPole),
            Command::ExpMountaincar => Some(EnvKind::MountainCar),
            _ => None,
        }
    }

    fn needs_env(self) -> bool {
        matches!(self, Command::TrainTeacher | Command::Distill | Command::Evaluate)
    }
}

/// Everything one invocation needs. Fields irrelevant to the command are
/// carried along with their defaults so the echoed config is complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub env: Option<EnvKind>,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Methods compared by the experiment presets; `distill` uses `gas.mode`.
    #[serde(default = "default_methods")]
    pub methods: Vec<Mode>,
    /// Seed of the teacher shared by every student in the policy presets.
    #[serde(default)]
    pub teacher_seed: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Modes per class swept by `exp-modes`.
    #[serde(default = "default_modes")]
    pub modes_per_class: Vec<usize>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default)]
    pub gas: GasConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub mnist: MnistConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_methods() -> Vec<Mode> {
    vec![Mode::Gas]
}

fn default_eval_episodes() -> usize {
    10
}

fn default_modes() -> Vec<usize> {
    (1..=8).collect()
}

fn default_dim() -> usize {
    10
}

impl RunConfig {
    /// Defaults for `command` (and `env`, when the command takes one).
    pub fn defaults(command: Command, env: Option<EnvKind>) -> RunConfig {
        let env = command.fixed_env().or(env);
        let mut c = RunConfig {
            command,
            env,
            teacher_checkpoint: None,
            out_dir: default_out_dir(),
            seeds: default_seeds(),
            methods: default_methods(),
            teacher_seed: 0,
            eval_episodes: default_eval_episodes(),
            modes_per_class: default_modes(),
            dim: default_dim(),
            mnist_dir: None,
            gas: GasConfig::default(),
            ppo: env.map_or_else(PpoConfig::default, PpoConfig::for_env),
            toy: ToyConfig::default(),
            mnist: MnistConfig::default(),
        };
        let all = Mode::ALL.to_vec();
        match command {
            Command::TrainTeacher | Command::Distill | Command::Evaluate => {
                if env.is_some() {
                    c.gas = GasConfig::policy_defaults();
                }
            }
            Command::Gradcheck => {}
            Command::ExpFig1 => {
                c.seeds = (0..5).collect();
                c.methods = all;
                c.gas = toy_gas();
            }
            Command::ExpModes => {
                c.seeds = (0..5).collect();
                c.methods = all;
                c.toy = ToyConfig::multimode();
                c.gas = toy_gas();
            }
            Command::ExpMnist => {
                c.seeds = (0..3).collect();
                c.methods = vec![Mode::Gas, Mode::Dafl];
                c.gas = mnist_gas();
            }
            Command::ExpCartpole | Command::ExpMountaincar => {
                c.seeds = (0..5).collect();
                c.gas = GasConfig::policy_defaults();
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.eval_episodes == 0 || self.dim == 0 {
            return bad("eval_episodes and dim must be positive".into());
        }
        if self.command == Command::ExpModes && (self.modes_per_class.is_empty() || self.modes_per_class.contains(&0)) {
            return bad("modes_per_class must be non-empty and positive".into());
        }
        if self.command.needs_env() && self.env.is_none() {
            return bad(format!("{} needs an env", self.command.name()));
        }
        if let (Some(fixed), Some(env)) = (self.command.fixed_env(), self.env) {
            if fixed != env {
                return bad(format!("{} runs {}, not {}", self.command.name(), fixed.name(), env.name()));
            }
        }
        if matches!(self.command, Command::Distill | Command::Evaluate) {
            let Some(path) = &self.teacher_checkpoint else {
                return bad(format!("{} needs teacher_checkpoint", self.command.name()));
            };
            let manifest = crate::models::manifest_path(path);
            if !manifest.exists() {
                return bad(format!("teacher checkpoint {} does not exist", manifest.display()));
            }
        }
        if self.command == Command::ExpMnist {
            match &self.mnist_dir {
                None => return bad("exp-mnist needs mnist_dir".into()),
                Some(d) if !d.is_dir() => return bad(format!("mnist_dir {} is not a directory", d.display())),
                _ => {}
            }
        }
        self.gas.validate()?;
        self.ppo.validate()
    }
}

/// Overlays `patch` onto `base`: objects merge key by key, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Parses a config, rejecting unknown keys, and fills unspecified fields
/// with the defaults for its command and environment.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_for(text, None)
}

pub fn parse_config_for(text: &str, command: Option<Command>) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let named = value.get("command").and_then(Value::as_str).map(str::to_string);
    match (command, named.as_deref()) {
        (Some(c), Some(n)) if c.name() != n => {
            return Err(Error::Config(format!("config is for `{n}`, not `{}`", c.name())));
        }
        (Some(c), None) => {
            let Value::Object(mut o) = value else {
                return Err(Error::Config("config must be a JSON object".into()));
            };
            o.insert("command".into(), Value::String(c.name().into()));
            return parse_resolved(&serde_json::to_string(&o)?);
        }
        _ => {}
    }
    parse_resolved(text)
}

fn parse_resolved(text: &str) -> Result<RunConfig> {
    // strict parse of the text itself: syntax errors and unknown keys carry
    // line and column
    let raw: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = serde_json::to_value(RunConfig::defaults(raw.command, raw.env))?;
    let user: Value = serde_json::from_str(text)?;
    merge(&mut merged, user);
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    load_config_for(path, None)
}

/// Like [`load_config`]; a config without a `command` key takes
/// `command`, and one naming a different command is rejected.
pub fn load_config_for(path: &Path, command: Option<Command>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_for(&text, command).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes the fully resolved config as `config.json` in `dir`.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_policy_config_gets_table_defaults() {
        let c = parse_config(r#"{"command": "train-teacher", "env": "cartpole"}"#).unwrap();
        assert_eq!(c.gas.student_lr, 0.001);
        assert_eq!(c.gas.generator_lr, 0.001);
        assert_eq!(c.gas.student_steps, 5);
        assert_eq!(c.gas.generator_steps, 2);
        assert_eq!(c.gas.reinit_period, Some(10));
        assert_eq!(c.ppo, PpoConfig::for_env(EnvKind::CartPole));
        let m = parse_config(r#"{"command": "train-teacher", "env": "mountaincar"}"#).unwrap();
        assert_eq!(m.gas, c.gas);
        assert_eq!(m.ppo.discount, 0.995);
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let e = parse_config("{\"command\": \"exp-fig1\",\n \"gas\": {\"generater_lr\": 0.1}}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("generater_lr") && msg.contains("line 2"), "{msg}");
        assert!(parse_config(r#"{"command": "exp-fig1", "sedes": [1]}"#).is_err());
    }

    #[test]
    fn syntax_error_has_line() {
        let msg = parse_config("{\"command\": \"exp-fig1\",\n\n  \"seeds\": [1,}").unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn partial_nested_override_keeps_other_defaults() {
        let c = parse_config(r#"{"command": "exp-fig1", "gas": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.gas.epochs, 3);
        assert_eq!(c.gas.num_generators, toy_gas().num_generators);
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn resolved_config_is_a_fixpoint() {
        for cmd in [Command::ExpFig1, Command::ExpModes, Command::ExpCartpole, Command::Gradcheck] {
            let c = parse_config(&format!(r#"{{"command": "{}"}}"#, cmd.name())).unwrap();
            let again = parse_config(&serde_json::to_string_pretty(&c).unwrap()).unwrap();
            assert_eq!(c, again);
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config(r#"{"command": "exp-fig1", "seeds": []}"#).is_err());
        assert!(parse_config(r#"{"command": "train-teacher"}"#).is_err());
        assert!(parse_config(r#"{"command": "exp-cartpole", "env": "mountaincar"}"#).is_err());
        assert!(parse_config(r#"{"command": "distill", "env": "cartpole", "teacher_checkpoint": "/nonexistent/t"}"#).is_err());
        assert!(parse_config(r#"{"command": "exp-fig1", "gas": {"noise_batch": 0}}"#).is_err());
        assert!(parse_config(r#"{"command": "exp-mnist"}"#).is_err());
        assert!(parse_config(r#"{"command": "warp-drive"}"#).is_err());
    }
}
