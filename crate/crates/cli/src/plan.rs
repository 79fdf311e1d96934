// SPDX-License-Identifier: Apache-2.0

//! Session plan files.

use anyhow::{anyhow, bail, Result};
use bbs_core::identity::OrgId;
use bbs_core::netsim::{Mode, SessionOutcome, SessionPlan, Step};
use bbs_core::contract::Verdict;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    #[serde(default)]
    pub file_id: Option<String>,
    pub sender: String,
    pub receiver: String,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "one")]
    pub parallelism: u32,
    #[serde(default)]
    pub event_id: Option<String>,
    /// Simulation only: file the sender uploads first.
    #[serde(default)]
    pub source: Option<String>,
    /// Simulation only: size of a generated fixture when there is no source.
    #[serde(default)]
    pub fixture_size: Option<u64>,
    /// Simulation only: access rule for the upload.
    #[serde(default)]
    pub rule: Option<String>,
}

fn default_mode() -> String {
    "auto".into()
}

fn one() -> u32 {
    1
}

impl PlanFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn to_plan(&self, file_id: String) -> Result<SessionPlan> {
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        Ok(SessionPlan {
            file_id,
            sender: self.sender.parse::<OrgId>().map_err(|e| anyhow!("sender: {e}"))?,
            receiver: self.receiver.parse::<OrgId>().map_err(|e| anyhow!("receiver: {e}"))?,
            mode: parse_mode(&self.mode)?,
            parallelism: self.parallelism,
            event_id: self.event_id.clone(),
        })
    }
}

pub fn parse_step(s: &str) -> Result<Step> {
    Ok(match s {
        "request" => Step::Request,
        "transfer" => Step::Transfer,
        "keyaccess" | "key-access" => Step::KeyAccess,
        "decrypt" => Step::Decrypt,
        other => bail!("unknown phase {other:?}"),
    })
}

/// `auto`, `manual:<phase>`, `drop:<phase>`, `tamper` or `wrong-receiver`.
pub fn parse_mode(s: &str) -> Result<Mode> {
    let s = s.trim().to_ascii_lowercase();
    Ok(match s.split_once(':') {
        Some(("manual", p)) => Mode::Manual(parse_step(p)?),
        Some(("drop", p)) => Mode::DishonestDrop(parse_step(p)?),
        None if s == "auto" => Mode::Auto,
        None if s == "tamper" => Mode::TamperFile,
        None if s == "wrong-receiver" => Mode::WrongReceiver,
        _ => bail!("unknown mode {s:?}"),
    })
}

/// Whether a session ended the way its mode is meant to end.
pub fn met(mode: Mode, outcome: &SessionOutcome) -> bool {
    match (mode, outcome) {
        (Mode::Auto, SessionOutcome::Completed { verdict, .. }) => *verdict == Verdict::Verified,
        (Mode::Manual(Step::Decrypt), SessionOutcome::Completed { verdict, .. }) => *verdict == Verdict::Verified,
        (Mode::Manual(s), SessionOutcome::Stopped { after }) => s == *after,
        (Mode::DishonestDrop(s), SessionOutcome::Dropped { after }) => s == *after,
        (Mode::TamperFile, SessionOutcome::Completed { verdict, .. }) => *verdict == Verdict::HashMismatch,
        (Mode::WrongReceiver, SessionOutcome::Denied) => true,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse() {
        assert_eq!(parse_mode("auto").unwrap(), Mode::Auto);
        assert_eq!(parse_mode("manual:request").unwrap(), Mode::Manual(Step::Request));
        assert_eq!(parse_mode("drop:keyaccess").unwrap(), Mode::DishonestDrop(Step::KeyAccess));
        assert_eq!(parse_mode("Tamper").unwrap(), Mode::TamperFile);
        assert_eq!(parse_mode("wrong-receiver").unwrap(), Mode::WrongReceiver);
        assert!(parse_mode("drop").is_err());
        assert!(parse_mode("manual:upload").is_err());
    }

    #[test]
    fn plan_file_defaults() {
        let p: PlanFile = toml::from_str("sender = \"Org1\"\nreceiver = \"Org2\"\nfile_id = \"ab\"\n").unwrap();
        let plan = p.to_plan("ab".into()).unwrap();
        assert_eq!((plan.mode, plan.parallelism), (Mode::Auto, 1));
    }

    #[test]
    fn postconditions() {
        let done = |verdict| SessionOutcome::Completed { verdict, digest: None };
        assert!(met(Mode::Auto, &done(Verdict::Verified)));
        assert!(!met(Mode::Auto, &done(Verdict::HashMismatch)));
        assert!(met(Mode::TamperFile, &done(Verdict::HashMismatch)));
        assert!(met(Mode::WrongReceiver, &SessionOutcome::Denied));
        assert!(!met(Mode::Auto, &SessionOutcome::Denied));
        let dropped = SessionOutcome::Dropped { after: Step::KeyAccess };
        assert!(met(Mode::DishonestDrop(Step::KeyAccess), &dropped));
        assert!(!met(Mode::DishonestDrop(Step::Transfer), &dropped));
    }
}
