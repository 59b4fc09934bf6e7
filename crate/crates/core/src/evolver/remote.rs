//! Evolver backend behind a request/reply transport. Each call sends one
//! document and expects one back whose shape mirrors the local type.

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CandidateUpdate, Diagnosis, EditPlan, EvolveError, EvolverBackend, WindowRef};
use crate::evidence::Trajectory;
use crate::governance::VerificationReport;
use crate::registry::StateView;
use crate::remote::Transport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemoteEvolverParams {
    #[serde(default = "default_temperature")]
    pub sampling_temperature: f64,
    #[serde(default = "default_tokens")]
    pub max_output_tokens: u32,
}

fn default_temperature() -> f64 {
    0.7
}

fn default_tokens() -> u32 {
    8192
}

impl Default for RemoteEvolverParams {
    fn default() -> Self {
        Self { sampling_temperature: default_temperature(), max_output_tokens: default_tokens() }
    }
}

pub struct RemoteEvolver {
    transport: Arc<dyn Transport>,
    params: RemoteEvolverParams,
}

impl RemoteEvolver {
    pub fn new(transport: Arc<dyn Transport>, params: RemoteEvolverParams) -> Self {
        Self { transport, params }
    }

    fn call<T: DeserializeOwned>(&self, route: &str, mut request: Value) -> Result<T, EvolveError> {
        request["sampling_temperature"] = json!(self.params.sampling_temperature);
        request["max_output_tokens"] = json!(self.params.max_output_tokens);
        let reply = self.transport.exchange(route, &request).map_err(EvolveError::BackendUnavailable)?;
        serde_json::from_value(reply).map_err(|e| EvolveError::MalformedBackendReply(format!("{route}: {e}")))
    }
}

impl EvolverBackend for RemoteEvolver {
    fn diagnose(&self, window: &[Arc<Trajectory>], view: &StateView, window_ref: WindowRef) -> Result<Diagnosis, EvolveError> {
        let window: Vec<&Trajectory> = window.iter().map(Arc::as_ref).collect();
        let d: Diagnosis = self.call(
            "diagnose",
            json!({"window": window, "window_ref": window_ref, "snapshot_id": view.snapshot_id()}),
        )?;
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(EvolveError::MalformedBackendReply(format!("diagnose: confidence {} outside [0, 1]", d.confidence)));
        }
        if d.signatures.iter().any(|s| s.match_count >= 2) && d.objective.is_empty() {
            return Err(EvolveError::MalformedBackendReply("diagnose: signatures without an objective".into()));
        }
        // The id is ours to assign.
        Ok(Diagnosis::new(d.objective, d.signatures, d.implicated, d.confidence, window_ref, d.findings))
    }

    fn plan(&self, diagnosis: &Diagnosis, view: &StateView) -> Result<EditPlan, EvolveError> {
        let mut plan: EditPlan = self.call("plan", json!({"diagnosis": diagnosis, "snapshot_id": view.snapshot_id()}))?;
        plan.diagnosis_ref = diagnosis.id.clone();
        Ok(plan)
    }

    fn synthesize(
        &self,
        plan: &EditPlan,
        view: &StateView,
        attempt: u32,
        feedback: Option<&VerificationReport>,
    ) -> Result<CandidateUpdate, EvolveError> {
        let mut cand: CandidateUpdate = self.call(
            "synthesize",
            json!({
                "plan": plan,
                "snapshot_id": view.snapshot_id(),
                "attempt": attempt,
                "feedback": feedback,
            }),
        )?;
        cand.provenance.attempt = attempt;
        cand.provenance.plan_digest = plan.digest();
        Ok(cand)
    }
}
