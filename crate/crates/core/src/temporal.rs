//! Temporal modeling along the frame axis, independently per joint.
//!
//! [`PlainTc`] is a full-width convolution. [`MsTc`] reduces the channels
//! to `C / branches` with a shared 1x1 map, runs one depthwise temporal
//! convolution per branch (each with its own kernel and dilation) over those
//! reduced features, and concatenates the branches back to width `C`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{glorot_bound, uniform, ConvGeometry, NdArray, ParamId, ParamStore, Parameter, Tape, Var};
use crate::{Error, Result};

/// Kernel size and dilation of one multi-scale branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub kernel: usize,
    pub dilation: usize,
}

pub fn default_branches() -> Vec<Branch> {
    vec![
        Branch { kernel: 5, dilation: 1 },
        Branch { kernel: 5, dilation: 2 },
        Branch { kernel: 1, dilation: 1 },
    ]
}

pub const PLAIN_KERNEL: usize = 5;

fn add_param(store: &mut ParamStore, prefix: &str, name: &str, value: NdArray) -> ParamId {
    store.add(format!("{prefix}.{name}"), Parameter::new(value))
}

#[derive(Clone, Debug)]
pub struct PlainTc {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl PlainTc {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        let geometry = ConvGeometry::new(kernel, 1, stride)?;
        let bound = glorot_bound(kernel * channels, kernel * channels);
        Ok(Self {
            weight: add_param(store, prefix, "weight", uniform(&[kernel, channels, channels], bound, rng)),
            bias: add_param(store, prefix, "bias", NdArray::zeros(&[channels])),
            geometry,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.temporal_conv(x, w, self.geometry)?;
        let b = tape.param(self.bias);
        tape.add_suffix(y, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct MsTcBranch {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

#[derive(Clone, Debug)]
pub struct MsTc {
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub branches: Vec<MsTcBranch>,
    pub branch_width: usize,
}

impl MsTc {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        spec: &[Branch],
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.is_empty() || channels % spec.len() != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split evenly into {} temporal branches",
                spec.len()
            )));
        }
        let width = channels / spec.len();
        let reduce_weight = add_param(
            store,
            prefix,
            "reduce.weight",
            uniform(&[channels, width], glorot_bound(channels, width), rng),
        );
        let reduce_bias = add_param(store, prefix, "reduce.bias", NdArray::zeros(&[width]));
        let branches = spec
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let geometry = ConvGeometry::new(b.kernel, b.dilation, stride)?;
                let bound = glorot_bound(b.kernel, b.kernel);
                Ok(MsTcBranch {
                    weight: add_param(store, prefix, &format!("branch{i}.weight"), uniform(&[b.kernel, width], bound, rng)),
                    bias: add_param(store, prefix, &format!("branch{i}.bias"), NdArray::zeros(&[width])),
                    geometry,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            reduce_weight,
            reduce_bias,
            branches,
            branch_width: width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.reduce_weight);
        let reduced = tape.matmul(x, w)?;
        let b = tape.param(self.reduce_bias);
        let reduced = tape.add_suffix(reduced, b)?;
        let reduced = tape.relu(reduced);
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let w = tape.param(br.weight);
            let y = tape.depthwise_conv(reduced, w, br.geometry)?;
            let b = tape.param(br.bias);
            outs.push(tape.add_suffix(y, b)?);
        }
        tape.concat_last(&outs)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.reduce_weight, self.reduce_bias];
        for b in &self.branches {
            ids.extend([b.weight, b.bias]);
        }
        ids
    }
}

/// Either temporal module, as used by one model layer.
#[derive(Clone, Debug)]
pub enum TemporalBlock {
    Plain(PlainTc),
    MultiScale(MsTc),
}

impl TemporalBlock {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::Plain(tc) => tc.forward(tape, x),
            Self::MultiScale(ms) => ms.forward(tape, x),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Self::Plain(tc) => tc.ids(),
            Self::MultiScale(ms) => ms.ids(),
        }
    }
}

fn channels_first(
    store: &ParamStore,
    x: &NdArray,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<NdArray> {
    if x.ndim() != 4 {
        return Err(Error::Shape {
            op: "temporal",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.permute(&[0, 2, 3, 1])?);
    let y = f(&mut tape, xv)?;
    tape.value(y).permute(&[0, 3, 1, 2])
}

/// Multi-scale block on an `[N, C, T, V]` array; returns `[N, C, T', V]`.
pub fn ms_tc_forward(store: &ParamStore, params: &MsTc, x: &NdArray) -> Result<NdArray> {
    channels_first(store, x, |t, v| params.forward(t, v))
}

/// Plain block on an `[N, C, T, V]` array; returns `[N, C, T', V]`.
pub fn plain_tc_forward(store: &ParamStore, params: &PlainTc, x: &NdArray) -> Result<NdArray> {
    channels_first(store, x, |t, v| params.forward(t, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nested(x: &NdArray, n: usize) -> Vec<Vec<Vec<f64>>> {
        let s = x.shape();
        (0..s[1])
            .map(|c| (0..s[2]).map(|t| (0..s[3]).map(|v| x.get(&[n, c, t, v])).collect()).collect())
            .collect()
    }

    #[test]
    fn ms_tc_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut store = ParamStore::new();
        let ms1 = MsTc::init(&mut store, "a", 6, &default_branches(), 1, &mut rng).unwrap();
        let ms2 = MsTc::init(&mut store, "b", 6, &default_branches(), 2, &mut rng).unwrap();
        let x = uniform(&[2, 6, 64, 3], 1.0, &mut rng);
        assert_eq!(ms_tc_forward(&store, &ms1, &x).unwrap().shape(), &[2, 6, 64, 3]);
        assert_eq!(ms_tc_forward(&store, &ms2, &x).unwrap().shape(), &[2, 6, 32, 3]);
        assert!(matches!(
            MsTc::init(&mut store, "c", 8, &default_branches(), 1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ms_tc_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for stride in [1, 2] {
            let mut store = ParamStore::new();
            let ms = MsTc::init(&mut store, "ms", 6, &default_branches(), stride, &mut rng).unwrap();
            for id in ms.ids() {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).value = uniform(&shape, 0.7, &mut rng);
            }
            let x = uniform(&[2, 6, 9, 4], 1.0, &mut rng);
            let got = ms_tc_forward(&store, &ms, &x).unwrap();
            let rw = store.value(ms.reduce_weight);
            let rb = store.value(ms.reduce_bias);
            // reduction as a kernel-1 convolution: w[o][i][0]
            let w1: Vec<Vec<Vec<f64>>> = (0..2).map(|o| (0..6).map(|i| vec![rw.get(&[i, o])]).collect()).collect();
            for n in 0..2 {
                let mut reduced = oracle::temporal_conv(&nested(&x, n), &w1, 1, 1);
                for (o, plane) in reduced.iter_mut().enumerate() {
                    plane.iter_mut().flatten().for_each(|v| *v = (*v + rb.data()[o]).max(0.0));
                }
                for (bi, (br, spec)) in ms.branches.iter().zip(default_branches()).enumerate() {
                    let bw = store.value(br.weight);
                    let bb = store.value(br.bias);
                    // depthwise as a dense convolution with diagonal channel mixing
                    let dense: Vec<Vec<Vec<f64>>> = (0..2)
                        .map(|o| {
                            (0..2)
                                .map(|i| (0..spec.kernel).map(|k| if i == o { bw.get(&[k, o]) } else { 0.0 }).collect())
                                .collect()
                        })
                        .collect();
                    let want = oracle::temporal_conv(&reduced, &dense, spec.dilation, stride);
                    for (o, plane) in want.iter().enumerate() {
                        for (t, row) in plane.iter().enumerate() {
                            for (j, &w) in row.iter().enumerate() {
                                let g = got.get(&[n, bi * 2 + o, t, j]);
                                assert!((g - (w + bb.data()[o])).abs() < 1e-10);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn plain_tc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut store = ParamStore::new();
        let tc = PlainTc::init(&mut store, "tc", 4, 5, 1, &mut rng).unwrap();
        let x = uniform(&[1, 4, 7, 3], 1.0, &mut rng);

        // centre tap only: a per-position channel mix
        let mix = uniform(&[4, 4], 1.0, &mut rng);
        let mut w = NdArray::zeros(&[5, 4, 4]);
        for i in 0..4 {
            for o in 0..4 {
                w.set(&[2, i, o], mix.get(&[i, o]));
            }
        }
        store.get_mut(tc.weight).value = w;
        let y = plain_tc_forward(&store, &tc, &x).unwrap();
        for t in 0..7 {
            for v in 0..3 {
                for o in 0..4 {
                    let want: f64 = (0..4).map(|i| x.get(&[0, i, t, v]) * mix.get(&[i, o])).sum();
                    assert!((y.get(&[0, o, t, v]) - want).abs() < 1e-12);
                }
            }
        }

        store.get_mut(tc.weight).value.fill(0.0);
        assert_eq!(plain_tc_forward(&store, &tc, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn plain_tc_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut store = ParamStore::new();
        let tc = PlainTc::init(&mut store, "tc", 3, 5, 2, &mut rng).unwrap();
        let x = uniform(&[1, 3, 11, 2], 1.0, &mut rng);
        let y = plain_tc_forward(&store, &tc, &x).unwrap();
        let w = store.value(tc.weight);
        let wo: Vec<Vec<Vec<f64>>> = (0..3).map(|o| (0..3).map(|i| (0..5).map(|k| w.get(&[k, i, o])).collect()).collect()).collect();
        let want = oracle::temporal_conv(&nested(&x, 0), &wo, 1, 2);
        for (o, plane) in want.iter().enumerate() {
            for (t, row) in plane.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    assert!((y.get(&[0, o, t, j]) - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn ms_tc_is_smaller_than_plain_tc() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for c in [6, 24, 216] {
            let mut a = ParamStore::new();
            MsTc::init(&mut a, "ms", c, &default_branches(), 1, &mut rng).unwrap();
            let mut b = ParamStore::new();
            PlainTc::init(&mut b, "tc", c, PLAIN_KERNEL, 1, &mut rng).unwrap();
            assert!(a.count_trainable() < b.count_trainable());
        }
    }

    #[test]
    fn strided_output_is_translation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut store = ParamStore::new();
        let ms = MsTc::init(&mut store, "ms", 3, &default_branches(), 2, &mut rng).unwrap();
        let (t, shift) = (32, 2);
        let x = uniform(&[1, 3, t, 2], 1.0, &mut rng);
        let shifted = NdArray::from_fn(&[1, 3, t, 2], |i| {
            if i[2] >= 2 * shift { x.get(&[i[0], i[1], i[2] - 2 * shift, i[3]]) } else { 0.0 }
        });
        let y = ms_tc_forward(&store, &ms, &x).unwrap();
        let ys = ms_tc_forward(&store, &ms, &shifted).unwrap();
        // receptive field of the widest branch is 4 frames either side
        for to in 2 + shift..t / 2 - 3 {
            for c in 0..3 {
                for v in 0..2 {
                    assert!((ys.get(&[0, c, to, v]) - y.get(&[0, c, to - shift, v])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ms_tc_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut store = ParamStore::new();
        let ms = MsTc::init(&mut store, "ms", 6, &default_branches(), 2, &mut rng).unwrap();
        for id in ms.ids() {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = uniform(&shape, 0.7, &mut rng);
        }
        let x = uniform(&[2, 7, 3, 6], 1.0, &mut rng);
        let probe = uniform(&[2, 4, 3, 6], 1.0, &mut rng);
        let report = finite_diff_check(&mut store, &ms.ids(), 1e-5, |t| {
            let xv = t.constant(x.clone());
            let y = ms.forward(t, xv)?;
            let p = t.constant(probe.clone());
            let prod = t.mul(y, p)?;
            Ok(t.sum(prod))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
