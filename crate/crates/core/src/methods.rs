//! The fourteen compared methods behind one trait, registered under their
//! canonical names.
//!
//! Plug-in and debiased DRUM variants of the same generator kind share the
//! outcome model and preliminary generator through [`SharedFits`]; the shared
//! fits depend only on the run seed and profile, so sharing never changes a
//! result.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    classifier_weights, fit_chisq_dro, fit_erm, fit_pseudolabel, fit_weighted_erm, kmm_weights, BaselineModel, Imputer,
    KmmOptions, NetHp, Trainer,
};
use crate::data::{LabeledSet, Task, UnlabeledSet};
use crate::debias::{debias_from_preliminary, DebiasHp, DebiasedPredictor, Preliminary};
use crate::drum::{
    fit_drum_with_outcome, fit_outcome_model, DrumFit, DrumHp, GeneratorKind, OutcomeModel, RobustPredictor,
};
use crate::error::{Error, Result, StageExt};
use crate::nnet::TrainConfig;
use crate::rng::derive_seed;
use crate::simgen::Setting;

pub const BASELINE_ERM: &str = "Baseline-ERM";
pub const BASELINE_DRO: &str = "Baseline-DRO";
pub const IW_KMM: &str = "IW-KMM";
pub const IW_CLASSIFY: &str = "IW-Classify";
pub const DRUM_UNCONSTRAINED: &str = "DRUM (unconstrained)";
pub const DRUM: &str = "DRUM";
pub const DRUM_DEBIASED_UNCONSTRAINED: &str = "DRUM-Debiased (unconstrained)";
pub const DRUM_DEBIASED: &str = "DRUM-Debiased";

/// Every registered method, baselines first.
pub const CANONICAL: [&str; 14] = [
    BASELINE_ERM,
    BASELINE_DRO,
    IW_KMM,
    IW_CLASSIFY,
    "PL-Mean+ERM",
    "PL-Mean+DRO",
    "PL-MICE+ERM",
    "PL-MICE+DRO",
    "PL-MF+ERM",
    "PL-MF+DRO",
    DRUM_UNCONSTRAINED,
    DRUM,
    DRUM_DEBIASED_UNCONSTRAINED,
    DRUM_DEBIASED,
];

/// Canonical names of the ten baselines.
pub fn baseline_names() -> &'static [&'static str] {
    &CANONICAL[..10]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DroHp {
    pub net: NetHp,
    pub rho: f64,
}

impl Default for DroHp {
    fn default() -> Self {
        DroHp {
            net: net(1e-3, 50),
            rho: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmmHp {
    pub net: NetHp,
    pub kmm: KmmOptions,
}

/// Hyperparameters of every method for one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Profile {
    pub erm: NetHp,
    pub dro: DroHp,
    pub kmm: KmmHp,
    pub classify: NetHp,
    pub pl_mean_erm: NetHp,
    pub pl_mean_dro: DroHp,
    pub pl_mice_erm: NetHp,
    pub pl_mice_dro: DroHp,
    pub pl_mf_erm: NetHp,
    pub pl_mf_dro: DroHp,
    pub drum: DrumHp,
    pub debias: DebiasHp,
}

fn net(lr: f64, epochs: usize) -> NetHp {
    NetHp {
        hidden: vec![128, 128],
        train: TrainConfig::new(lr, epochs),
    }
}

fn dro(lr: f64, epochs: usize, rho: f64) -> DroHp {
    DroHp {
        net: net(lr, epochs),
        rho,
    }
}

impl Default for Profile {
    fn default() -> Self {
        Profile::for_setting(Setting::II, 2)
    }
}

impl Profile {
    /// Selected values of the published tuning runs. Settings I and II
    /// have their own tables; Setting III keeps the Setting-II values and
    /// widens the generator latent space to `max(4, d_A)`. Pseudo-label
    /// values for Setting I, which were not reported, follow Setting II.
    pub fn for_setting(setting: Setting, d_a: usize) -> Profile {
        let mut p = Profile {
            erm: net(1e-3, 50),
            dro: dro(1e-3, 50, 0.5),
            kmm: KmmHp {
                net: net(1e-3, 50),
                kmm: KmmOptions::default(),
            },
            classify: net(1e-3, 50),
            pl_mean_erm: net(1e-3, 20),
            pl_mean_dro: dro(1e-3, 20, 0.25),
            pl_mice_erm: net(1e-3, 30),
            pl_mice_dro: dro(1e-3, 30, 0.25),
            pl_mf_erm: net(1e-3, 50),
            pl_mf_dro: dro(1e-3, 50, 0.25),
            drum: DrumHp::default(),
            debias: DebiasHp::default(),
        };
        match setting {
            Setting::I => {
                p.erm = net(1e-3, 20);
                p.dro = dro(5e-4, 50, 0.25);
                p.kmm.net = net(1e-3, 30);
                p.classify = net(5e-4, 50);
            }
            Setting::II => {}
            Setting::III => p.drum.worstcase.latent_dim = d_a.max(4),
        }
        p
    }
}

/// Inputs shared by every method of one run.
pub struct FitContext<'a> {
    pub source: &'a LabeledSet,
    pub target: &'a UnlabeledSet,
    pub task: Task,
    pub profile: &'a Profile,
    pub seed: u64,
    pub shared: &'a SharedFits,
}

impl FitContext<'_> {
    fn method_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, &format!("method.{name}"), 0)
    }

    fn drum_seed(&self) -> u64 {
        derive_seed(self.seed, "method.drum", 0)
    }
}

/// Memoized fits reused across methods of one run. Build a fresh value for
/// every (data, seed, profile) combination.
#[derive(Default)]
pub struct SharedFits {
    outcome: Mutex<Option<Arc<OutcomeModel>>>,
    unconstrained: Mutex<Option<Arc<DrumFit>>>,
    conditional: Mutex<Option<Arc<DrumFit>>>,
}

impl SharedFits {
    pub fn outcome(&self, ctx: &FitContext) -> Result<Arc<OutcomeModel>> {
        let mut slot = self.outcome.lock().expect("outcome cache poisoned");
        if let Some(m) = slot.as_ref() {
            return Ok(m.clone());
        }
        let seed = derive_seed(ctx.drum_seed(), "drum.outcome", 0);
        let m =
            Arc::new(fit_outcome_model(ctx.source, ctx.task, &ctx.profile.drum.outcome, seed).stage("outcome model")?);
        *slot = Some(m.clone());
        Ok(m)
    }

    pub fn plugin(&self, ctx: &FitContext, kind: GeneratorKind) -> Result<Arc<DrumFit>> {
        let cell = match kind {
            GeneratorKind::Unconstrained => &self.unconstrained,
            GeneratorKind::Conditional => &self.conditional,
        };
        let mut slot = cell.lock().expect("plug-in cache poisoned");
        if let Some(f) = slot.as_ref() {
            return Ok(f.clone());
        }
        let outcome = (*self.outcome(ctx)?).clone();
        let fit = Arc::new(fit_drum_with_outcome(
            outcome,
            ctx.source,
            ctx.target,
            kind,
            &ctx.profile.drum,
            ctx.drum_seed(),
        )?);
        *slot = Some(fit.clone());
        Ok(fit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Predictor {
    Baseline(BaselineModel),
    Robust(RobustPredictor),
    Debiased(DebiasedPredictor),
}

/// Training diagnostics carried alongside a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_lambda: Option<f64>,
    #[serde(default)]
    pub lambda_capped: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// A fitted method: everything needed to predict from `X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub method: String,
    pub task: Task,
    pub d_x: usize,
    pub predictor: Predictor,
    pub diagnostics: Diagnostics,
}

impl ModelBundle {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.d_x {
            return Err(Error::Input(format!(
                "{} expects {} covariate columns, got {}",
                self.method,
                self.d_x,
                x.ncols()
            )));
        }
        let out = match &self.predictor {
            Predictor::Baseline(m) => m.predict(x)?,
            Predictor::Robust(p) => p.predict(x)?,
            Predictor::Debiased(p) => p.predict(x)?,
        };
        Ok(match self.task {
            Task::Regression => out,
            Task::Binary => out.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }
}

pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, ctx: &FitContext) -> Result<ModelBundle>;
}

fn bundle(name: &str, ctx: &FitContext, predictor: Predictor, diagnostics: Diagnostics) -> ModelBundle {
    ModelBundle {
        method: name.into(),
        task: ctx.task,
        d_x: ctx.source.d_x(),
        predictor,
        diagnostics,
    }
}

struct Erm;

impl Method for Erm {
    fn name(&self) -> &'static str {
        BASELINE_ERM
    }

    fn fit(&self, ctx: &FitContext) -> Result<ModelBundle> {
        let s = ctx.source;
        let m = fit_erm(
            s.x.view(),
            s.y.view(),
            ctx.task,
            &ctx.profile.erm,
            ctx.method_seed(self.name()),
        )?;
        Ok(bundle(self.name(), ctx, Predictor::Baseline(m), Diagnostics::default()))
    }
}

struct Dro;

impl Method for Dro {
    fn name(&self) -> &'static str {
        BASELINE_DRO
    }

    fn fit(&self, ctx: &FitContext) -> Result<ModelBundle> {
        let s = ctx.source;
        let hp = &ctx.profile.dro;
        let m = fit_chisq_dro(
            s.x.view(),
            s.y.view(),
            ctx.task,
            hp.rho,
            &hp.net,
            ctx.method_seed(self.name()),
        )?;
        Ok(bundle(self.name(), ctx, Predictor::Baseline(m), Diagnostics::default()))
    }
}

#[derive(Clone, Copy)]
enum Weighting {
    Kmm,
    Classify,
}

struct ImportanceWeighted(Weighting);

impl Method for ImportanceWeighted {
    fn name(&self) -> &'static str {
        match self.0 {
            Weighting::Kmm => IW_KMM,
            Weighting::Classify => IW_CLASSIFY,
        }
    }

    fn fit(&self, ctx: &FitContext) -> Result<ModelBundle> {
        let s = ctx.source;
        let seed = ctx.method_seed(self.name());
        let (w, hp) = match self.0 {
            Weighting::Kmm => (
                kmm_weights(
                    s.x.view(),
                    ctx.target.x.view(),
                    &ctx.profile.kmm.kmm,
                    derive_seed(seed, "weights", 0),
                )
                .stage("kernel mean matching")?,
                &ctx.profile.kmm.net,
            ),
            Weighting::Classify => (
                classifier_weights(s.x.view(), ctx.target.x.view())
                    .stage("domain classifier")?
                    .0,
                &ctx.profile.classify,
            ),
        };
        let diagnostics = Diagnostics {
            ess: Some(w.ess),
            warnings: w.warning.iter().cloned().collect(),
            ..Diagnostics::default()
        };
        let m = fit_weighted_erm(s.x.view(), s.y.view(), ctx.task, w, hp, seed)?;
        Ok(bundle(self.name(), ctx, Predictor::Baseline(m), diagnostics))
    }
}

struct PseudoLabel {
    name: &'static str,
    imputer: Imputer,
    robust: bool,
}

impl Method for PseudoLabel {
    fn name(&self) -> &'static str {
        self.name
    }

    fn fit(&self, ctx: &FitContext) -> Result<ModelBundle> {
        let p = ctx.profile;
        let (net, rho) = match (self.imputer, self.robust) {
            (Imputer::Mean, false) => (&p.pl_mean_erm, None),
            (Imputer::Mean, true) => (&p.pl_mean_dro.net, Some(p.pl_mean_dro.rho)),
            (Imputer::Mice, false) => (&p.pl_mice_erm, None),
            (Imputer::Mice, true) => (&p.pl_mice_dro.net, Some(p.pl_mice_dro.rho)),
            (Imputer::Forest, false) => (&p.pl_mf_erm, None),
            (Imputer::Forest, true) => (&p.pl_mf_dro.net, Some(p.pl_mf_dro.rho)),
        };
        let trainer = rho.map_or(Trainer::Erm, |rho| Trainer::ChisqDro { rho });
        let s = ctx.source;
        let m = fit_pseudolabel(
            s.x.view(),
            s.y.view(),
            ctx.target.x.view(),
            ctx.task,
            self.imputer,
            trainer,
            net,
            ctx.method_seed(self.name),
        )?;
        Ok(bundle(self.name, ctx, Predictor::Baseline(m), Diagnostics::default()))
    }
}

fn plugin_diagnostics(fit: &DrumFit) -> Diagnostics {
    Diagnostics {
        energy_gap: fit.final_gap,
        final_lambda: fit.budget.as_ref().map(|b| b.dual_lambda),
        lambda_capped: fit.lambda_capped,
        warnings: fit
            .lambda_capped
            .then(|| "dual multiplier reached its cap".to_string())
            .into_iter()
            .collect(),
        ..Diagnostics::default()
    }
}

struct PlugIn(GeneratorKind);

impl Method for PlugIn {
    fn name(&self) -> &'static str {
        match self.0 {
            GeneratorKind::Unconstrained => DRUM_UNCONSTRAINED,
            GeneratorKind::Conditional => DRUM,
        }
    }

    fn fit(&self, ctx: &FitContext) -> Result<ModelBundle> {
        let fit = ctx.shared.plugin(ctx, self.0)?;
        Ok(bundle(
            self.name(),
            ctx,
            Predictor::Robust(fit.predictor.clone()),
            plugin_diagnostics(&fit),
        ))
    }
}

struct Debiased(GeneratorKind);

impl Method for Debiased {
    fn name(&self) -> &'static str {
        match self.0 {
            GeneratorKind::Unconstrained => DRUM_DEBIASED_UNCONSTRAINED,
            GeneratorKind::Conditional => DRUM_DEBIASED,
        }
    }

    fn fit(&self, ctx: &FitContext) -> Result<ModelBundle> {
        let prelim = ctx.shared.plugin(ctx, self.0)?;
        let fit = debias_from_preliminary(
            ctx.source,
            ctx.target,
            ctx.task,
            &Preliminary::from_fit(&prelim),
            &ctx.profile.debias,
            ctx.method_seed(self.name()),
        )?;
        Ok(bundle(
            self.name(),
            ctx,
            Predictor::Debiased(fit.predictor),
            plugin_diagnostics(&prelim),
        ))
    }
}

/// Canonical name → method.
pub struct Registry {
    methods: BTreeMap<&'static str, Box<dyn Method>>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::standard()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Registry {
            methods: BTreeMap::new(),
        }
    }

    /// All fourteen methods.
    pub fn standard() -> Self {
        let mut r = Registry::empty();
        r.register(Box::new(Erm));
        r.register(Box::new(Dro));
        r.register(Box::new(ImportanceWeighted(Weighting::Kmm)));
        r.register(Box::new(ImportanceWeighted(Weighting::Classify)));
        for (name, imputer, robust) in [
            ("PL-Mean+ERM", Imputer::Mean, false),
            ("PL-Mean+DRO", Imputer::Mean, true),
            ("PL-MICE+ERM", Imputer::Mice, false),
            ("PL-MICE+DRO", Imputer::Mice, true),
            ("PL-MF+ERM", Imputer::Forest, false),
            ("PL-MF+DRO", Imputer::Forest, true),
        ] {
            r.register(Box::new(PseudoLabel { name, imputer, robust }));
        }
        for kind in [GeneratorKind::Unconstrained, GeneratorKind::Conditional] {
            r.register(Box::new(PlugIn(kind)));
            r.register(Box::new(Debiased(kind)));
        }
        r
    }

    /// Adds or replaces a method under its own name.
    pub fn register(&mut self, method: Box<dyn Method>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Method> {
        self.methods
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown method {name:?}; known: {}", self.names().join(", "))))
    }

    /// Registered names in canonical order, extras last.
    pub fn names(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = CANONICAL
            .iter()
            .copied()
            .filter(|n| self.methods.contains_key(n))
            .collect();
        out.extend(self.methods.keys().copied().filter(|n| !CANONICAL.contains(n)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_covers_canonical_names() {
        let r = Registry::standard();
        assert_eq!(r.names(), CANONICAL.to_vec());
        for name in CANONICAL {
            assert_eq!(r.get(name).unwrap().name(), name);
        }
        assert!(matches!(r.get("DRUM-Plus"), Err(Error::Config(_))));
    }

    #[test]
    fn setting_profiles_follow_tuning_tables() {
        let p = Profile::for_setting(Setting::I, 5);
        assert_eq!((p.erm.train.lr, p.erm.train.epochs), (1e-3, 20));
        assert_eq!(
            (p.dro.net.train.lr, p.dro.net.train.epochs, p.dro.rho),
            (5e-4, 50, 0.25)
        );
        assert_eq!((p.kmm.net.train.lr, p.kmm.net.train.epochs), (1e-3, 30));
        assert_eq!((p.classify.train.lr, p.classify.train.epochs), (5e-4, 50));
        let p = Profile::for_setting(Setting::II, 2);
        assert_eq!((p.dro.net.train.lr, p.dro.rho), (1e-3, 0.5));
        assert_eq!(p.pl_mean_dro.net.train.epochs, 20);
        assert_eq!(Profile::for_setting(Setting::III, 7).drum.worstcase.latent_dim, 7);
        assert_eq!(Profile::for_setting(Setting::III, 3).drum.worstcase.latent_dim, 4);
    }

    #[test]
    fn bundle_rejects_wrong_width() {
        let mut r = crate::rng::stream(1, "test", 0);
        let x = crate::rng::normal_matrix(&mut r, 64, 3);
        let a = crate::rng::normal_matrix(&mut r, 64, 1);
        let y = x.column(0).to_owned();
        let source = LabeledSet::new(x.clone(), a, y).unwrap();
        let target = UnlabeledSet::new(x).unwrap();
        let mut profile = Profile::default();
        profile.erm.train.epochs = 1;
        let shared = SharedFits::default();
        let ctx = FitContext {
            source: &source,
            target: &target,
            task: Task::Regression,
            profile: &profile,
            seed: 0,
            shared: &shared,
        };
        let b = Registry::standard().get(BASELINE_ERM).unwrap().fit(&ctx).unwrap();
        assert_eq!(b.predict(source.x.view()).unwrap().len(), 64);
        let wide = ndarray::Array2::zeros((2, 4));
        assert!(b.predict(wide.view()).is_err());
        let json = serde_json::to_string(&b).unwrap();
        let back: ModelBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
    }
}
