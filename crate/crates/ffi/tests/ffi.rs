use std::ffi::{CStr, CString};
use std::ptr;

use amopt_ffi::*;

const TOML: &str = "env = \"multi_modal_bandit\"\nseed = 4\n[train]\noptimizer = \"iterative\"\npolicy_hidden = 8\nq_hidden = 8\ntotal_steps = 40\ninitial_random_steps = 20\nbatch = 8\neval_episodes = 2\neval_every = 20\ncheckpoint_every = 20\nlog_every = 10\n";

fn last_error() -> String {
    let p = amopt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config(text: &str) -> (AmoptStatus, *mut AmoptConfig) {
    let c = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { amopt_config_from_toml(c.as_ptr(), &mut out) };
    (status, out)
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(amopt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_carry_codes_and_messages() {
    let (s, out) = config("seed = 1\n");
    assert_eq!(s, AmoptStatus::Config);
    assert!(out.is_null());
    assert!(last_error().contains("env"));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { amopt_config_from_toml(ptr::null(), &mut out) }, AmoptStatus::NullPointer);

    let (s, c) = config(TOML);
    assert_eq!(s, AmoptStatus::Ok);
    assert!(amopt_last_error().is_null());
    unsafe { amopt_config_free(c) };
}

#[test]
fn act_checks_lengths_and_is_seeded() {
    let (_, c) = config(TOML);
    let mut agent = ptr::null_mut();
    unsafe {
        assert_eq!(amopt_agent_new(c, &mut agent), AmoptStatus::Ok);
        let (mut od, mut ad) = (0usize, 0usize);
        assert_eq!(amopt_agent_dims(agent, &mut od, &mut ad), AmoptStatus::Ok);
        assert_eq!(ad, 2);
        let obs = vec![0.0; od];
        let mut a1 = [0.0; 2];
        let mut a2 = [0.0; 2];
        assert_eq!(amopt_agent_act(agent, obs.as_ptr(), od, false, 7, a1.as_mut_ptr(), 2), AmoptStatus::Ok);
        assert_eq!(amopt_agent_act(agent, obs.as_ptr(), od, false, 7, a2.as_mut_ptr(), 2), AmoptStatus::Ok);
        assert_eq!(a1, a2);
        assert!(a1.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert_eq!(
            amopt_agent_act(agent, obs.as_ptr(), od, true, 0, a1.as_mut_ptr(), 3),
            AmoptStatus::InvalidArgument
        );
        assert!(last_error().contains("action_len"));
        assert_eq!(amopt_agent_act(ptr::null(), obs.as_ptr(), od, true, 0, a1.as_mut_ptr(), 2), AmoptStatus::NullPointer);
        amopt_agent_free(agent);
        amopt_config_free(c);
    }
}

#[test]
fn train_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, c) = config(TOML);
    let run = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let ck = CString::new(dir.path().join("agent.ckpt").to_str().unwrap()).unwrap();
    unsafe {
        let mut trained = ptr::null_mut();
        assert_eq!(amopt_train(c, run.as_ptr(), &mut trained), AmoptStatus::Ok);
        assert!(dir.path().join("run/metrics.csv").exists());
        assert_eq!(amopt_agent_save(trained, ck.as_ptr()), AmoptStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(amopt_agent_load(ck.as_ptr(), &mut loaded), AmoptStatus::Ok);
        let obs = [0.0];
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        amopt_agent_act(trained, obs.as_ptr(), 1, true, 3, a.as_mut_ptr(), 2);
        amopt_agent_act(loaded, obs.as_ptr(), 1, true, 3, b.as_mut_ptr(), 2);
        assert_eq!(a, b);
        amopt_agent_free(trained);
        amopt_agent_free(loaded);
        amopt_config_free(c);

        let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(amopt_agent_load(missing.as_ptr(), &mut out), AmoptStatus::Io);
        assert!(out.is_null());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/amopt.h")).unwrap();
    for name in [
        "amopt_version",
        "amopt_last_error",
        "amopt_config_from_toml",
        "amopt_config_free",
        "amopt_agent_new",
        "amopt_train",
        "amopt_agent_load",
        "amopt_agent_save",
        "amopt_agent_free",
        "amopt_agent_dims",
        "amopt_agent_act",
        "typedef struct AmoptAgent AmoptAgent",
        "AMOPT_STATUS_NULL_POINTER = 1",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
