//! C interface to amopt.
//!
//! Every function returns an [`AmoptStatus`]. On failure the message is kept
//! per thread and can be read with [`amopt_last_error`]. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use amopt::checkpoint;
use amopt::config::RunConfig;
use amopt::training::{train, Agent};
use amopt::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmoptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Incompatible = 4,
    Io = 5,
    Numerical = 6,
    Panic = 7,
    Internal = 8,
}

impl From<&Error> for AmoptStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => AmoptStatus::Config,
            Error::InvalidArgument(_) | Error::Shape { .. } | Error::Tensor(_) => AmoptStatus::InvalidArgument,
            Error::Incompatible(_) | Error::Format(_) => AmoptStatus::Incompatible,
            Error::Io { .. } => AmoptStatus::Io,
            Error::NonFinite(_) | Error::Divergence(_) => AmoptStatus::Numerical,
            _ => AmoptStatus::Internal,
        }
    }
}

/// A validated run configuration.
pub struct AmoptConfig {
    inner: RunConfig,
}

/// An agent plus the configuration it acts under.
pub struct AmoptAgent {
    agent: Agent,
    cfg: RunConfig,
    step: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(AmoptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AmoptStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmoptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AmoptStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AmoptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AmoptStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn amopt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn amopt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses and validates a TOML run configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amopt_config_from_toml(toml: *const c_char, out: *mut *mut AmoptConfig) -> AmoptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(toml, "toml")?;
        let inner = RunConfig::from_toml_str(text)?;
        *out = Box::into_raw(Box::new(AmoptConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`amopt_config_from_toml`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn amopt_config_free(config: *mut AmoptConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds an untrained agent for `config`.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amopt_agent_new(config: *const AmoptConfig, out: *mut *mut AmoptAgent) -> AmoptStatus {
    guard(|| {
        let (Some(config), false) = (config.as_ref(), out.is_null()) else {
            return Err(null("config or out"));
        };
        let agent = Agent::new(&config.inner)?;
        *out = Box::into_raw(Box::new(AmoptAgent {
            agent,
            cfg: config.inner.clone(),
            step: 0,
        }));
        Ok(())
    })
}

/// Runs a full training job. `out_dir` may be NULL to skip writing files.
///
/// # Safety
/// `config` must be a live handle, `out_dir` NULL or a NUL-terminated
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amopt_train(
    config: *const AmoptConfig,
    out_dir: *const c_char,
    out: *mut *mut AmoptAgent,
) -> AmoptStatus {
    guard(|| {
        let (Some(config), false) = (config.as_ref(), out.is_null()) else {
            return Err(null("config or out"));
        };
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(out_dir, "out_dir")?))
        };
        let run = train(&config.inner, dir.as_deref())?;
        *out = Box::into_raw(Box::new(AmoptAgent {
            agent: run.agent,
            cfg: config.inner.clone(),
            step: config.inner.train.total_steps,
        }));
        Ok(())
    })
}

/// Restores an agent from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amopt_agent_load(path: *const c_char, out: *mut *mut AmoptAgent) -> AmoptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = checkpoint::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(AmoptAgent {
            cfg: ck.header.config.clone(),
            step: ck.header.step,
            agent: ck.agent,
        }));
        Ok(())
    })
}

/// Writes `agent` to a checkpoint file.
///
/// # Safety
/// `agent` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn amopt_agent_save(agent: *const AmoptAgent, path: *const c_char) -> AmoptStatus {
    guard(|| {
        let agent = agent.as_ref().ok_or_else(|| null("agent"))?;
        checkpoint::save(str_arg(path, "path")?, &agent.agent, &agent.cfg, agent.step)?;
        Ok(())
    })
}

/// # Safety
/// `agent` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn amopt_agent_free(agent: *mut AmoptAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Observation and action sizes of the agent's environment.
///
/// # Safety
/// `agent` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn amopt_agent_dims(
    agent: *const AmoptAgent,
    obs_dim: *mut usize,
    action_dim: *mut usize,
) -> AmoptStatus {
    guard(|| {
        let agent = agent.as_ref().ok_or_else(|| null("agent"))?;
        if obs_dim.is_null() || action_dim.is_null() {
            return Err(null("obs_dim or action_dim"));
        }
        let spec = agent.agent.env.spec();
        *obs_dim = spec.state_dim;
        *action_dim = spec.action_dim;
        Ok(())
    })
}

/// Chooses an action for one observation. With `deterministic` the squashed
/// mean is returned, otherwise one sample drawn from a generator seeded
/// with `seed`. Iterative agents also use `seed` for their inner noise.
///
/// # Safety
/// `obs` must point to `obs_len` doubles and `action` to `action_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn amopt_agent_act(
    agent: *const AmoptAgent,
    obs: *const f64,
    obs_len: usize,
    deterministic: bool,
    seed: u64,
    action: *mut f64,
    action_len: usize,
) -> AmoptStatus {
    guard(|| {
        let agent = agent.as_ref().ok_or_else(|| null("agent"))?;
        if obs.is_null() || action.is_null() {
            return Err(null("obs or action"));
        }
        let spec = agent.agent.env.spec();
        if obs_len != spec.state_dim || action_len != spec.action_dim {
            return Err(Failure(
                AmoptStatus::InvalidArgument,
                format!(
                    "expected obs_len {} and action_len {}, got {obs_len} and {action_len}",
                    spec.state_dim, spec.action_dim
                ),
            ));
        }
        let obs = std::slice::from_raw_parts(obs, obs_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = agent.agent.act(obs, &agent.cfg, deterministic, &mut rng)?;
        std::slice::from_raw_parts_mut(action, action_len).copy_from_slice(&out.action);
        Ok(())
    })
}
