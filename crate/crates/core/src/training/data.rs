//! Synthetic skeleton actions.
//!
//! Every sample is a rest pose with a per-sample jitter, a few joints
//! oscillating sinusoidally on top, and white noise. Classes differ only in
//! which joints move and how. Two drive kinds exist for the co-movement pair:
//! two joints of one group moving together, versus two joints of two
//! different groups moving together. Per joint the two look identical, so a
//! model that cannot see group structure has to fall back on the rest-pose
//! coordinates, which the jitter blurs.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::hypergraph::empirical_partition;
use crate::numerics::NdArray;
use crate::skeleton::{derive_bone, derive_motion, SkeletonGraph};
use crate::{Error, Result};

/// Which joints a motion program moves in a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drive {
    Joints { joints: Vec<usize> },
    /// `count` distinct joints anywhere on the body.
    Anywhere { count: usize },
    /// `count` distinct joints of one group.
    WithinGroup { count: usize },
    /// `count` joints from `count` distinct groups.
    AcrossGroups { count: usize },
}

/// Joints chosen by `drive` share one phase and one direction per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionProgram {
    pub drive: Drive,
    /// Full cycles per window.
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticActionSpec {
    pub class_id: usize,
    pub programs: Vec<MotionProgram>,
    pub noise: f64,
    /// Std of the per-sample, per-joint offset added to the rest pose.
    pub rest_jitter: f64,
    /// `[x, y, z]` per joint.
    pub rest_pose: Vec<[f64; 3]>,
    /// Group of each joint, for the group-relative drives.
    pub groups: Vec<usize>,
}

impl SyntheticActionSpec {
    pub fn num_joints(&self) -> usize {
        self.rest_pose.len()
    }

    fn validate(&self) -> Result<()> {
        let v = self.num_joints();
        if self.groups.len() != v {
            return Err(Error::Config(format!(
                "class {}: {} group labels for {v} joints",
                self.class_id,
                self.groups.len()
            )));
        }
        if self.noise < 0.0 || self.rest_jitter < 0.0 {
            return Err(Error::Config(format!("class {}: negative noise", self.class_id)));
        }
        let sizes = group_members(&self.groups);
        for p in &self.programs {
            if !(p.amplitude >= 0.0) || !p.frequency.is_finite() {
                return Err(Error::Config(format!(
                    "class {}: amplitude must be >= 0 and frequency finite",
                    self.class_id
                )));
            }
            let ok = match &p.drive {
                Drive::Joints { joints } => joints.iter().all(|&j| j < v),
                Drive::Anywhere { count } => *count <= v,
                Drive::WithinGroup { count } => sizes.iter().any(|m| m.len() >= *count),
                Drive::AcrossGroups { count } => sizes.len() >= *count,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "class {}: drive {:?} cannot be satisfied on {v} joints",
                    self.class_id, p.drive
                )));
            }
        }
        Ok(())
    }
}

fn group_members(groups: &[usize]) -> Vec<Vec<usize>> {
    let e = groups.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); e];
    for (j, &g) in groups.iter().enumerate() {
        out[g].push(j);
    }
    out.retain(|m| !m.is_empty());
    out
}

fn pick(drive: &Drive, members: &[Vec<usize>], v: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match drive {
        Drive::Joints { joints } => joints.clone(),
        Drive::Anywhere { count } => rand::seq::index::sample(rng, v, *count).into_vec(),
        Drive::WithinGroup { count } => {
            let eligible: Vec<&Vec<usize>> = members.iter().filter(|m| m.len() >= *count).collect();
            let group = eligible.choose(rng).expect("validated");
            group.choose_multiple(rng, *count).copied().collect()
        }
        Drive::AcrossGroups { count } => {
            let mut order: Vec<usize> = (0..members.len()).collect();
            order.shuffle(rng);
            order[..*count]
                .iter()
                .map(|&g| *members[g].choose(rng).expect("groups are non-empty"))
                .collect()
        }
    }
}

/// Samples `[N, 3, T, V]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: NdArray,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: NdArray, labels: Vec<usize>) -> Result<Self> {
        if samples.ndim() != 4 || samples.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: samples.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// The samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (NdArray, Vec<usize>) {
        let s = self.samples.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * per..(i + 1) * per]);
        }
        let shape = [indices.len(), s[1], s[2], s[3]];
        let batch = NdArray::new(&shape, data).expect("sizes agree");
        (batch, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (samples, labels) = self.gather(indices);
        Self { samples, labels }
    }

    /// Same samples in another input modality.
    pub fn to_modality(&self, modality: Modality, skeleton: &SkeletonGraph) -> Result<Self> {
        let samples = match modality {
            Modality::Joint => self.samples.clone(),
            Modality::Bone => derive_bone(&self.samples, skeleton)?,
            Modality::Motion => derive_motion(&self.samples)?,
            Modality::BoneMotion => derive_motion(&derive_bone(&self.samples, skeleton)?)?,
        };
        Ok(Self {
            samples,
            labels: self.labels.clone(),
        })
    }

    pub fn round_to_f32(&mut self) {
        for x in self.samples.data_mut() {
            *x = f64::from(*x as f32);
        }
    }

    /// Writes `samples.bin` and `labels.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        container::write(dir.join("samples.bin"), &self.samples, container::Dtype::F64)?;
        container::write_labels(dir.join("labels.bin"), &self.labels)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::new(
            container::read(dir.join("samples.bin"))?,
            container::read_labels(dir.join("labels.bin"))?,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Joint,
    Bone,
    Motion,
    BoneMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Self::Joint, Self::Bone, Self::Motion, Self::BoneMotion];
}

/// `n_per_class` samples of every class, class-major, fully determined by
/// `seed`.
pub fn generate_dataset(specs: &[SyntheticActionSpec], n_per_class: usize, frames: usize, seed: u64) -> Result<Dataset> {
    if specs.len() < 2 {
        return Err(Error::Config("a dataset needs at least two classes".into()));
    }
    if n_per_class < 1 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if frames < 1 {
        return Err(Error::Config("frames must be at least 1".into()));
    }
    let v = specs[0].num_joints();
    for s in specs {
        s.validate()?;
        if s.num_joints() != v {
            return Err(Error::Config("all classes must share one skeleton".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 3 * frames * v;
    let mut data = Vec::with_capacity(specs.len() * n_per_class * per);
    let mut labels = Vec::with_capacity(specs.len() * n_per_class);
    for spec in specs {
        let members = group_members(&spec.groups);
        let noise = Normal::new(0.0, spec.noise).expect("validated");
        let jitter = Normal::new(0.0, spec.rest_jitter).expect("validated");
        for _ in 0..n_per_class {
            let mut sample = vec![0.0; per];
            let at = |c: usize, t: usize, j: usize| (c * frames + t) * v + j;
            for j in 0..v {
                for c in 0..3 {
                    let base = spec.rest_pose[j][c] + jitter.sample(&mut rng);
                    for t in 0..frames {
                        sample[at(c, t, j)] = base;
                    }
                }
            }
            for p in &spec.programs {
                let joints = pick(&p.drive, &members, v, &mut rng);
                let phase = rng.random_range(0.0..TAU);
                let dir = random_direction(&mut rng);
                for t in 0..frames {
                    let s = p.amplitude * (TAU * p.frequency * t as f64 / frames as f64 + phase).sin();
                    for &j in &joints {
                        for c in 0..3 {
                            sample[at(c, t, j)] += s * dir[c];
                        }
                    }
                }
            }
            for x in sample.iter_mut() {
                *x += noise.sample(&mut rng);
            }
            data.extend(sample);
            labels.push(spec.class_id);
        }
    }
    Dataset::new(NdArray::new(&[labels.len(), 3, frames, v], data)?, labels)
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return d.map(|x| x / n);
        }
    }
}

/// A spread-out rest pose read off the parent map: each joint sits one unit
/// from its parent, at an angle picked by its index.
pub fn rest_pose(skeleton: &SkeletonGraph) -> Result<Vec<[f64; 3]>> {
    let parent = skeleton
        .parent()
        .ok_or_else(|| Error::Config("rest pose needs a parent map".into()))?;
    let v = skeleton.num_joints();
    let mut pose: Vec<Option<[f64; 3]>> = vec![None; v];
    fn place(j: usize, parent: &[usize], v: usize, pose: &mut [Option<[f64; 3]>]) -> [f64; 3] {
        if let Some(p) = pose[j] {
            return p;
        }
        let p = if parent[j] == j {
            [0.0; 3]
        } else {
            let base = place(parent[j], parent, v, pose);
            let a = TAU * j as f64 / v as f64;
            [base[0] + a.cos(), base[1] + a.sin(), base[2] + 0.25]
        };
        pose[j] = Some(p);
        p
    }
    Ok((0..v).map(|j| place(j, parent, v, &mut pose)).collect())
}

/// Knobs of the built-in four-class suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub n_per_class: usize,
    /// Held-out samples per class, generated after the training ones.
    pub eval_per_class: usize,
    pub frames: usize,
    pub noise: f64,
    pub rest_jitter: f64,
    /// Multiplies the rest pose, whose bones are one unit long.
    pub rest_scale: f64,
    pub amplitude: f64,
    /// Partition strategy whose groups define "within" and "across".
    pub groups: String,
    pub modality: Modality,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            eval_per_class: 50,
            frames: 12,
            noise: 0.05,
            rest_jitter: 0.1,
            rest_scale: 0.2,
            amplitude: 1.0,
            groups: "body_parts".into(),
            modality: Modality::Joint,
        }
    }
}

/// Class of the within-group co-movement samples.
pub const WITHIN_CLASS: usize = 2;
/// Class of the across-group co-movement samples.
pub const ACROSS_CLASS: usize = 3;

/// The four toy classes:
///
/// 0. one joint anywhere, one cycle per window;
/// 1. three joints anywhere, three cycles per window, independently phased;
/// 2. two joints of one group moving together, two cycles;
/// 3. two joints of two groups moving together, two cycles.
pub fn toy_suite(skeleton: &SkeletonGraph, spec: &DataSpec) -> Result<Vec<SyntheticActionSpec>> {
    let groups = empirical_partition(&spec.groups, skeleton)?.assignment().to_vec();
    let rest: Vec<[f64; 3]> = rest_pose(skeleton)?
        .into_iter()
        .map(|p| p.map(|x| x * spec.rest_scale))
        .collect();
    let prog = |drive, frequency| MotionProgram {
        drive,
        frequency,
        amplitude: spec.amplitude,
    };
    let class = |class_id, programs| SyntheticActionSpec {
        class_id,
        programs,
        noise: spec.noise,
        rest_jitter: spec.rest_jitter,
        rest_pose: rest.clone(),
        groups: groups.clone(),
    };
    Ok(vec![
        class(0, vec![prog(Drive::Anywhere { count: 1 }, 1.0)]),
        class(1, (0..3).map(|_| prog(Drive::Anywhere { count: 1 }, 3.0)).collect()),
        class(WITHIN_CLASS, vec![prog(Drive::WithinGroup { count: 2 }, 2.0)]),
        class(ACROSS_CLASS, vec![prog(Drive::AcrossGroups { count: 2 }, 2.0)]),
    ])
}

/// Training and held-out splits of the toy suite under one seed, in the
/// requested modality.
pub fn toy_splits(skeleton: &SkeletonGraph, spec: &DataSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let specs = toy_suite(skeleton, spec)?;
    let all = generate_dataset(&specs, spec.n_per_class + spec.eval_per_class, spec.frames, seed)?;
    let per = spec.n_per_class + spec.eval_per_class;
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for c in 0..specs.len() {
        train.extend(c * per..c * per + spec.n_per_class);
        eval.extend(c * per + spec.n_per_class..(c + 1) * per);
    }
    let all = all.to_modality(spec.modality, skeleton)?;
    Ok((all.subset(&train), all.subset(&eval)))
}
