//! Agent checkpoints: a one-line JSON header followed by one parameter container.
//!
//! ```text
//! AMOPTCKPT
//! {"format":1,"amopt_version":"0.1.0","env":...,"config":...}
//! <AMOPT1 container holding policy/, q0/, target0/, ..., temperature/>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::training::{Agent, OptimizerKind, PolicyOptimizer};

const MAGIC: &[u8] = b"AMOPTCKPT\n";

/// Version of the checkpoint layout; bumped on incompatible changes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub amopt_version: String,
    pub env: String,
    pub optimizer: OptimizerKind,
    pub step: usize,
    pub has_models: bool,
    pub has_rollout: bool,
    pub config: RunConfig,
}

fn pack(agent: &Agent) -> Result<ParamStore> {
    let mut all = ParamStore::new();
    all.extend_prefixed("policy", agent.policy.store())?;
    for (i, (n, t)) in agent.critics.nets.iter().zip(&agent.critics.targets).enumerate() {
        all.extend_prefixed(&format!("q{i}"), &n.store)?;
        all.extend_prefixed(&format!("target{i}"), &t.store)?;
    }
    all.extend_prefixed("temperature", &agent.temperature.store)?;
    if let Some(mb) = &agent.mb {
        all.extend_prefixed("dynamics", &mb.models.dynamics.store)?;
        all.extend_prefixed("reward", &mb.models.reward.store)?;
        if let Some(r) = &mb.rollout {
            all.extend_prefixed("rollout", &r.store)?;
        }
    }
    Ok(all)
}

pub fn to_bytes(agent: &Agent, cfg: &RunConfig, step: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: FORMAT_VERSION,
        amopt_version: env!("CARGO_PKG_VERSION").to_string(),
        env: agent.env.name().to_string(),
        optimizer: agent.policy.kind(),
        step,
        has_models: agent.mb.is_some(),
        has_rollout: agent.mb.as_ref().is_some_and(|m| m.rollout.is_some()),
        config: cfg.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&pack(agent)?.to_bytes());
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, agent: &Agent, cfg: &RunConfig, step: usize) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(agent, cfg, step)?)
}

/// A restored agent together with the header it was saved with.
#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub agent: Agent,
}

impl Checkpoint {
    pub fn config(&self) -> &RunConfig {
        &self.header.config
    }
}

/// Reads only the header, checking the format version.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("not an amopt checkpoint (missing AMOPTCKPT magic)".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let format = value.get("format").and_then(|v| v.as_u64());
    let version = value.get("amopt_version").and_then(|v| v.as_str()).unwrap_or("unknown");
    if format != Some(FORMAT_VERSION as u64) {
        return Err(Error::Incompatible(format!(
            "checkpoint format {} (written by amopt {version}) is not supported by amopt {} (format {FORMAT_VERSION})",
            format.map_or("unknown".to_string(), |f| f.to_string()),
            env!("CARGO_PKG_VERSION"),
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    Ok((header, &rest[nl + 1..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, body) = read_header(bytes)?;
    let stored = ParamStore::from_bytes(body)?;
    let mut agent = Agent::new(&header.config)?;
    if header.has_models && agent.mb.is_none() {
        let mut rng = crate::rng::substream(header.config.seed, "init");
        agent.attach_models(&header.config, &mut rng)?;
    }
    if agent.env.name() != header.env || agent.policy.kind() != header.optimizer {
        return Err(Error::Incompatible("checkpoint header disagrees with its embedded config".into()));
    }
    let load = |store: &mut ParamStore, prefix: &str| store.load_values(&stored.sub_store(prefix));
    load(agent.policy.store_mut(), "policy")?;
    for i in 0..agent.critics.nets.len() {
        load(&mut agent.critics.nets[i].store, &format!("q{i}"))?;
        load(&mut agent.critics.targets[i].store, &format!("target{i}"))?;
    }
    load(&mut agent.temperature.store, "temperature")?;
    if let Some(mb) = agent.mb.as_mut() {
        load(&mut mb.models.dynamics.store, "dynamics")?;
        load(&mut mb.models.reward.store, "reward")?;
        if let Some(r) = mb.rollout.as_mut() {
            if header.has_rollout {
                load(&mut r.store, "rollout")?;
            }
        }
    }
    Ok(Checkpoint { header, agent })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&crate::io::read(path)?)
}

/// True when `agent`'s optimizer ignores the objective it is handed.
pub fn objective_independent(agent: &Agent) -> bool {
    matches!(agent.policy, PolicyOptimizer::Direct(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    fn cfg(optimizer: OptimizerKind, mb: bool) -> RunConfig {
        let mut c = RunConfig::for_env(EnvKind::PendulumSwingUp);
        c.train.optimizer = optimizer;
        c.train.policy_hidden = 8;
        c.train.q_hidden = Some(8);
        c.model_based.enabled = mb;
        c.model_based.model_hidden = 8;
        c.seed = 5;
        c
    }

    fn all_values(agent: &Agent) -> Vec<u8> {
        pack(agent).unwrap().to_bytes()
    }

    #[test]
    fn round_trip_preserves_every_parameter() {
        for (opt, mb) in [
            (OptimizerKind::Direct, false),
            (OptimizerKind::Iterative, false),
            (OptimizerKind::Iterative, true),
            (OptimizerKind::Direct, true),
        ] {
            let c = cfg(opt, mb);
            let mut agent = Agent::new(&c).unwrap();
            // move every value away from its init so a silent re-init would show
            let mut perturbed = pack(&agent).unwrap();
            for i in 0..perturbed.len() {
                perturbed.value_mut(i).data_mut().iter_mut().for_each(|x| *x += 0.125);
            }
            agent.policy.store_mut().load_values(&perturbed.sub_store("policy")).unwrap();
            agent.critics.targets[1].store.load_values(&perturbed.sub_store("target1")).unwrap();
            let bytes = to_bytes(&agent, &c, 42).unwrap();
            let ck = from_bytes(&bytes).unwrap();
            assert_eq!(ck.header.step, 42);
            assert_eq!(ck.header.has_models, mb);
            assert_eq!(all_values(&ck.agent), all_values(&agent));
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let c = cfg(OptimizerKind::Direct, false);
        let agent = Agent::new(&c).unwrap();
        let bytes = to_bytes(&agent, &c, 0).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let tampered = text.replacen("\"format\":1", "\"format\":99", 1);
        let tampered = tampered.replacen(&format!("\"amopt_version\":\"{}\"", env!("CARGO_PKG_VERSION")), "\"amopt_version\":\"9.9.9\"", 1);
        // splice the edited header onto the untouched binary body
        let hdr_end = MAGIC.len() + bytes[MAGIC.len()..].iter().position(|&b| b == b'\n').unwrap() + 1;
        let new_hdr_end = MAGIC.len() + tampered.as_bytes()[MAGIC.len()..].iter().position(|&b| b == b'\n').unwrap() + 1;
        let mut spliced = tampered.as_bytes()[..new_hdr_end].to_vec();
        spliced.extend_from_slice(&bytes[hdr_end..]);
        let e = from_bytes(&spliced).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        let msg = e.to_string();
        assert!(msg.contains("9.9.9") && msg.contains(env!("CARGO_PKG_VERSION")), "{msg}");
    }

    #[test]
    fn garbage_is_rejected() {
        assert_eq!(from_bytes(b"hello").unwrap_err().exit_code(), 3);
        let c = cfg(OptimizerKind::Direct, false);
        let bytes = to_bytes(&Agent::new(&c).unwrap(), &c, 0).unwrap();
        assert_eq!(from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().exit_code(), 3);
    }
}
