//! End-to-end cross-domain comparison on synthetic data: generate both
//! domains, meta-train on the source and evaluate several prediction
//! methods on the same target episodes.

use crate::config::Config;
use crate::episodes::synthesize;
use crate::error::Result;
use crate::eval::{evaluate, EpisodeRecord, EvalReport, Method};
use crate::pipeline::{meta_train, ModelState, TrainHistory, TrainLogLine};

/// No fine-tuning, fine-tuning, fine-tuning without transduction, and
/// fine-tuning with the augmentation ensemble.
pub fn comparison_methods(t_test: usize) -> Vec<Method> {
    let m = |name: &str, finetune, augment, t| Method {
        name: name.to_string(),
        finetune,
        augment,
        t,
    };
    vec![
        m("transduction", false, false, t_test),
        m("tmhfs", true, false, t_test),
        m("inductive", true, false, 0),
        m("tmhfs_da", true, true, t_test),
    ]
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub model: ModelState,
    pub history: TrainHistory,
    pub methods: Vec<Method>,
    /// Per method, per episode.
    pub records: Vec<Vec<EpisodeRecord>>,
    pub reports: Vec<EvalReport>,
}

impl Outcome {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

pub fn run(cfg: &Config, methods: &[Method], jobs: usize, on_log: impl FnMut(&TrainLogLine)) -> Result<Outcome> {
    cfg.validate()?;
    let source = synthesize(&cfg.data.source)?;
    let target = synthesize(&cfg.data.target)?;
    let model = ModelState::new(cfg.train.backbone, source.num_classes(), cfg.train.seed)?;
    let (model, history) = meta_train(model, &source, &cfg.train, on_log)?;
    let records = evaluate(&model, &target, &cfg.eval, &cfg.finetune, &cfg.pipelines()?, methods, jobs)?;
    let hash = cfg.hash();
    let reports = methods
        .iter()
        .zip(&records)
        .map(|(m, r)| EvalReport::from_records(&m.name, r, &hash))
        .collect::<Result<_>>()?;
    Ok(Outcome {
        model,
        history,
        methods: methods.to_vec(),
        records,
        reports,
    })
}
