//! Named strategy registry.
//!
//! Interchangeable algorithm variants (yaw criteria, motion classifiers,
//! overlap measures) are registered under a name and looked up from config
//! or CLI flags at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::boxfit::{BoxFitConfig, PlainCloseness, SaturatedCloseness, YawCriterion};
use crate::eval::{BevOverlap, Overlap, VolumeOverlap};
use crate::lomm::{classify_track, LommConfig};
use crate::tracker::{InstanceTrack, MotionClass};

/// Decides whether a track moves.
pub trait MotionClassifier: Send + Sync {
    fn name(&self) -> &'static str;
    fn classify(&self, track: &InstanceTrack) -> MotionClass;
}

/// Displacement-statistics test with z-ratio and net-distance thresholds.
#[derive(Debug, Clone, Copy)]
pub struct LommClassifier(pub LommConfig);

impl MotionClassifier for LommClassifier {
    fn name(&self) -> &'static str {
        "lomm"
    }
    fn classify(&self, track: &InstanceTrack) -> MotionClass {
        classify_track(track, &self.0)
    }
}

/// Treats every track as parked.
#[derive(Debug, Clone, Copy, Default)]
pub struct AllStationary;

impl MotionClassifier for AllStationary {
    fn name(&self) -> &'static str {
        "stationary"
    }
    fn classify(&self, _track: &InstanceTrack) -> MotionClass {
        MotionClass::Stationary
    }
}

type CriterionFactory = Arc<dyn Fn(&BoxFitConfig) -> Box<dyn YawCriterion> + Send + Sync>;
type ClassifierFactory = Arc<dyn Fn(&LommConfig) -> Box<dyn MotionClassifier> + Send + Sync>;
type OverlapFactory = Arc<dyn Fn() -> Box<dyn Overlap> + Send + Sync>;

#[derive(Clone)]
pub struct Registry {
    criteria: BTreeMap<String, CriterionFactory>,
    classifiers: BTreeMap<String, ClassifierFactory>,
    overlaps: BTreeMap<String, OverlapFactory>,
}

impl Default for Registry {
    /// Registry holding all built-in strategies.
    fn default() -> Self {
        let mut r = Self::empty();
        r.register_criterion("saturated-closeness", |cfg| {
            Box::new(SaturatedCloseness {
                alpha: cfg.alpha,
                low: cfg.percentile_low,
                high: cfg.percentile_high,
            })
        });
        r.register_criterion("closeness", |_| Box::new(PlainCloseness));
        r.register_classifier("lomm", |cfg| Box::new(LommClassifier(*cfg)));
        r.register_classifier("stationary", |_| Box::new(AllStationary));
        r.register_overlap("bev", || Box::new(BevOverlap));
        r.register_overlap("3d", || Box::new(VolumeOverlap));
        r
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            criteria: BTreeMap::new(),
            classifiers: BTreeMap::new(),
            overlaps: BTreeMap::new(),
        }
    }

    pub fn register_criterion<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&BoxFitConfig) -> Box<dyn YawCriterion> + Send + Sync + 'static,
    {
        self.criteria.insert(name.to_string(), Arc::new(factory));
    }

    pub fn register_classifier<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&LommConfig) -> Box<dyn MotionClassifier> + Send + Sync + 'static,
    {
        self.classifiers.insert(name.to_string(), Arc::new(factory));
    }

    pub fn register_overlap<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> Box<dyn Overlap> + Send + Sync + 'static,
    {
        self.overlaps.insert(name.to_string(), Arc::new(factory));
    }

    pub fn criterion(&self, name: &str, cfg: &BoxFitConfig) -> Option<Box<dyn YawCriterion>> {
        self.criteria.get(name).map(|f| f(cfg))
    }

    pub fn classifier(&self, name: &str, cfg: &LommConfig) -> Option<Box<dyn MotionClassifier>> {
        self.classifiers.get(name).map(|f| f(cfg))
    }

    pub fn overlap(&self, name: &str) -> Option<Box<dyn Overlap>> {
        self.overlaps.get(name).map(|f| f())
    }

    pub fn criterion_names(&self) -> impl Iterator<Item = &str> {
        self.criteria.keys().map(String::as_str)
    }

    pub fn classifier_names(&self) -> impl Iterator<Item = &str> {
        self.classifiers.keys().map(String::as_str)
    }

    pub fn overlap_names(&self) -> impl Iterator<Item = &str> {
        self.overlaps.keys().map(String::as_str)
    }
}
