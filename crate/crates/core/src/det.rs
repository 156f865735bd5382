//! Deputy-enhanced transfer on the client.
//!
//! Each client keeps a personalized model `p`, which communication never
//! overwrites, and a deputy `d`, which receives the server aggregate. Within
//! a communication window the client moves forward through three phases,
//! gated by validation macro F1 (`phi`):
//!
//! | phase     | deputy loss            | personalized loss      |
//! |-----------|------------------------|------------------------|
//! | Recover   | CE + KL(d ‖ p)         | CE                     |
//! | Exchange  | CE + KL(d ‖ p)         | CE + KL(p ‖ d)         |
//! | Sublimate | CE                     | CE + KL(p ‖ d)         |
//!
//! The KL teacher is always held constant. In every batch the deputy is
//! updated first and the personalized model then distils from the updated
//! deputy. Phases are re-evaluated once per local epoch and never move
//! backwards until the next deputy arrives, which resets to Recover.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, macro_f1};
use crate::model::{
    backward, ce_loss, forward, gather_batch, kl_div, predict_probs, sgd_step, Batch, ForwardCache, ModelSpec,
    OptimizerState,
};
use crate::tensor::NamedTensorMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DetPhase {
    Recover,
    Exchange,
    Sublimate,
}

impl DetPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            DetPhase::Recover => "RECOVER",
            DetPhase::Exchange => "EXCHANGE",
            DetPhase::Sublimate => "SUBLIMATE",
        }
    }
}

impl std::fmt::Display for DetPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DetConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.7,
            lambda2: 0.9,
        }
    }
}

impl DetConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let c = Self { lambda1, lambda2 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lambda1 && self.lambda1 < self.lambda2 && self.lambda2 < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < lambda1 < lambda2 < 1, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Phase implied by the latest validation scores, never earlier than `current`.
pub fn det_phase_transition(phi_d: f64, phi_p: f64, cfg: &DetConfig, current: DetPhase) -> DetPhase {
    let target = if phi_d >= cfg.lambda2 * phi_p {
        DetPhase::Sublimate
    } else if phi_d >= cfg.lambda1 * phi_p {
        DetPhase::Exchange
    } else {
        DetPhase::Recover
    };
    target.max(current)
}

/// Loss applied to one model in a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    CrossEntropy,
    /// Cross-entropy plus KL from this model to the other (held constant).
    CrossEntropyKl,
}

/// `(deputy, personalized)` objectives for a phase.
pub fn phase_objectives(phase: DetPhase) -> (Objective, Objective) {
    match phase {
        DetPhase::Recover => (Objective::CrossEntropyKl, Objective::CrossEntropy),
        DetPhase::Exchange => (Objective::CrossEntropyKl, Objective::CrossEntropyKl),
        DetPhase::Sublimate => (Objective::CrossEntropy, Objective::CrossEntropyKl),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub personalized: NamedTensorMap,
    pub deputy: NamedTensorMap,
    pub phase: DetPhase,
    /// `None` until the deputy is evaluated after its latest delivery.
    pub phi_d: Option<f64>,
    pub phi_p: f64,
    pub opt_p: OptimizerState,
    pub opt_d: OptimizerState,
    /// Global local-epoch counter; drives the learning-rate schedule.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Phase in effect while training this epoch.
    pub phase: DetPhase,
    /// Mean cross-entropy of the personalized model.
    pub ce_loss: f64,
    /// Mean KL(d ‖ p) measured before each batch update.
    pub kl_loss: f64,
    pub phi_d: f64,
    pub phi_p: f64,
    /// Phase for the next epoch.
    pub next_phase: DetPhase,
}

/// Macro F1 of `params` on `samples`.
pub fn validation_f1(params: &NamedTensorMap, spec: &ModelSpec, samples: &Samples) -> Result<f64> {
    let probs = predict_probs(params, spec, &samples.features)?;
    macro_f1(&argmax_rows(&probs, spec.classes()), &samples.labels, spec.classes())
}

fn step_model(
    params: &mut NamedTensorMap,
    spec: &ModelSpec,
    cache: &ForwardCache,
    labels: &[usize],
    teacher: Option<&[f64]>,
    opt: &OptimizerState,
) -> Result<()> {
    let classes = spec.classes();
    let mut d = ce_loss(cache.probs(), labels, classes)?.dlogits;
    if let Some(t) = teacher {
        let kl = kl_div(cache.probs(), t, classes)?;
        for (a, b) in d.iter_mut().zip(&kl.dlogits_p) {
            *a += b;
        }
    }
    let grads = backward(params, spec, cache, &d)?;
    sgd_step(params, &grads, opt)
}

impl ClientState {
    /// A client whose deputy starts as a copy of the personalized model.
    pub fn new(id: usize, init: NamedTensorMap, opt: OptimizerState) -> Self {
        Self {
            id,
            deputy: init.clone(),
            personalized: init,
            phase: DetPhase::Recover,
            phi_d: None,
            phi_p: 0.0,
            opt_p: opt,
            opt_d: opt,
            epoch: 0,
        }
    }

    /// Installs a server aggregate as the new deputy and restarts the phase
    /// cycle. The personalized model is untouched.
    pub fn receive_deputy(&mut self, aggregated: &NamedTensorMap) -> Result<()> {
        if !aggregated.same_structure(&self.personalized) {
            return Err(Error::InvalidCheckpoint(format!(
                "aggregate delivered to client {} does not match its model",
                self.id
            )));
        }
        self.deputy = aggregated.clone();
        self.phase = DetPhase::Recover;
        self.phi_d = None;
        Ok(())
    }

    pub fn upload_model(&self) -> NamedTensorMap {
        self.personalized.clone()
    }

    fn det_batch(&mut self, spec: &ModelSpec, batch: &Batch) -> Result<(f64, f64)> {
        let classes = spec.classes();
        let (obj_d, obj_p) = phase_objectives(self.phase);
        let cache_p = forward(&self.personalized, spec, batch)?;
        let cache_d = forward(&self.deputy, spec, batch)?;
        let ce = ce_loss(cache_p.probs(), &batch.labels, classes)?.loss;
        let kl = kl_div(cache_d.probs(), cache_p.probs(), classes)?.loss;

        let teacher_for_d = (obj_d == Objective::CrossEntropyKl).then(|| cache_p.probs());
        step_model(&mut self.deputy, spec, &cache_d, &batch.labels, teacher_for_d, &self.opt_d)?;

        match obj_p {
            Objective::CrossEntropy => {
                step_model(&mut self.personalized, spec, &cache_p, &batch.labels, None, &self.opt_p)?;
            }
            Objective::CrossEntropyKl => {
                let updated_d = forward(&self.deputy, spec, batch)?;
                step_model(
                    &mut self.personalized,
                    spec,
                    &cache_p,
                    &batch.labels,
                    Some(updated_d.probs()),
                    &self.opt_p,
                )?;
            }
        }
        Ok((ce, kl))
    }

    /// One pass over `train` in shuffled mini-batches under the current
    /// phase, then validation and the phase update.
    pub fn local_epoch(
        &mut self,
        spec: &ModelSpec,
        train: &Samples,
        val: &Samples,
        cfg: &DetConfig,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::InvalidDataset(format!("client {} has no training samples", self.id)));
        }
        self.opt_p.epoch = self.epoch;
        self.opt_d.epoch = self.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);

        let phase = self.phase;
        let (mut ce_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(batch_size.max(1)) {
            let batch = gather_batch(&train.features, &train.labels, train.dim, idx);
            let (ce, kl) = self.det_batch(spec, &batch)?;
            ce_sum += ce;
            kl_sum += kl;
            batches += 1;
        }

        let phi_d = validation_f1(&self.deputy, spec, val)?;
        let phi_p = validation_f1(&self.personalized, spec, val)?;
        self.phi_d = Some(phi_d);
        self.phi_p = phi_p;
        self.phase = det_phase_transition(phi_d, phi_p, cfg, phase);
        let log = EpochLog {
            epoch: self.epoch,
            phase,
            ce_loss: ce_sum / batches as f64,
            kl_loss: kl_sum / batches as f64,
            phi_d,
            phi_p,
            next_phase: self.phase,
        };
        self.epoch += 1;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_profiles, synth, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CFG: DetConfig = DetConfig {
        lambda1: 0.7,
        lambda2: 0.9,
    };

    #[test]
    fn transition_examples() {
        use DetPhase::*;
        assert_eq!(det_phase_transition(0.60, 1.0, &CFG, Recover), Recover);
        assert_eq!(det_phase_transition(0.75, 1.0, &CFG, Recover), Exchange);
        assert_eq!(det_phase_transition(0.95, 1.0, &CFG, Exchange), Sublimate);
        // Boundaries are inclusive.
        assert_eq!(det_phase_transition(0.35, 0.5, &CFG, Recover), Exchange);
        assert_eq!(det_phase_transition(0.45, 0.5, &CFG, Recover), Sublimate);
        // No backward moves inside a window.
        assert_eq!(det_phase_transition(0.1, 1.0, &CFG, Sublimate), Sublimate);
        // phi_p = 0 makes both triggers hold.
        assert_eq!(det_phase_transition(0.0, 0.0, &CFG, Recover), Sublimate);
    }

    #[test]
    fn phase_losses() {
        use Objective::*;
        assert_eq!(phase_objectives(DetPhase::Recover).1, CrossEntropy);
        assert_eq!(phase_objectives(DetPhase::Sublimate).0, CrossEntropy);
        assert_eq!(phase_objectives(DetPhase::Exchange), (CrossEntropyKl, CrossEntropyKl));
        assert!(DetConfig::new(0.9, 0.7).is_err());
        assert!(DetConfig::new(0.0, 0.7).is_err());
        assert!(DetConfig::new(0.7, 1.0).is_err());
    }

    fn client() -> (ModelSpec, ClientState, Samples, Samples) {
        let data = synth(&default_profiles(0.1).unwrap()[..1], 3).unwrap();
        let spec = ModelSpec::mlp(data.dim, 3);
        let init = spec.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let c = &data.clients[0];
        (
            spec,
            ClientState::new(0, init, OptimizerState::default()),
            c.samples(Split::Train),
            c.samples(Split::Val),
        )
    }

    #[test]
    fn receive_resets_phase_and_keeps_personalized() {
        let (spec, mut st, _, _) = client();
        let before = st.personalized.clone();
        st.phase = DetPhase::Sublimate;
        st.phi_d = Some(0.5);
        let agg = spec.init_params(&mut ChaCha8Rng::seed_from_u64(42));
        st.receive_deputy(&agg).unwrap();
        assert_eq!(st.phase, DetPhase::Recover);
        assert_eq!(st.phi_d, None);
        assert_eq!(st.deputy, agg);
        assert_eq!(st.personalized, before);
        assert_eq!(st.upload_model(), before);

        let mut up = st.upload_model();
        up.get_mut("fc1.bias").unwrap().data_mut()[0] = 9.0;
        assert_eq!(st.personalized, before);

        let wrong = ModelSpec::linear(32, 3).init_params(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(st.receive_deputy(&wrong), Err(Error::InvalidCheckpoint(_))));
    }

    #[test]
    fn first_recover_batch_has_zero_kl() {
        let (spec, mut st, train, _) = client();
        let batch = gather_batch(&train.features, &train.labels, train.dim, &[0, 1, 2, 3]);
        let (_, kl) = st.det_batch(&spec, &batch).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn zero_lr_freezes_personalized() {
        let (spec, mut st, train, val) = client();
        st.opt_p.base_lr = 0.0;
        st.receive_deputy(&spec.init_params(&mut ChaCha8Rng::seed_from_u64(8))).unwrap();
        let before = st.personalized.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for phase in [DetPhase::Recover, DetPhase::Exchange, DetPhase::Sublimate] {
            st.phase = phase;
            st.local_epoch(&spec, &train, &val, &CFG, 16, &mut rng).unwrap();
            assert_eq!(st.personalized, before);
        }
        assert_ne!(st.deputy, before);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (spec, mut st, _, val) = client();
        let empty = Samples {
            dim: 32,
            features: vec![],
            labels: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            st.local_epoch(&spec, &empty, &val, &CFG, 16, &mut rng),
            Err(Error::InvalidDataset(_))
        ));
    }
}
