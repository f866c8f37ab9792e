//! The full finite-difference suite: every differentiable primitive and
//! every composite module, each on several random instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, Block, Mona};
use crate::error::Result;
use crate::fusion::{ConvCat, Sca};
use crate::geometry::BEVGridSpec;
use crate::geometry::Box3D;
use crate::heads::{detection_loss, focal_loss, render_targets, AuxBranch, HeadOutput, Heads, LossConfig};
use crate::lidar::{voxelize, PillarEncoder, PointCloud};
use crate::params::{Init, ParamStore};
use crate::tensor::gradcheck::{check_fn, check_params, random_tensor, weighted_sum, CheckOptions, CheckReport};
use crate::tensor::{Graph, ReduceMode, Tensor, Var, SENTINEL_DROP};
use crate::view_transform::{lift_splat, nt_xent_align_loss, AlignBatch, SplatIndex};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: String,
    pub reports: Vec<CheckReport>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        !self.reports.is_empty() && self.reports.iter().all(|r| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for SuiteEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {} instances={} max_rel_err={:.3e}",
            self.op,
            if self.passed() { "PASS" } else { "FAIL" },
            self.reports.len(),
            self.max_rel_err()
        )
    }
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct FnCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    kinks: bool,
    f: OpFn,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> FnCase {
    FnCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        kinks: false,
        f: Box::new(f),
    }
}

fn kinked(mut c: FnCase) -> FnCase {
    c.kinks = true;
    c
}

/// `f(x)` contracted against fixed random weights.
fn unary(g: &mut Graph<f64>, v: &[Var], f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<Var> {
    let y = f(g, v[0])?;
    weighted_sum(g, y, 11)
}

fn primitive_cases() -> Vec<FnCase> {
    vec![
        case("add", &[&[2, 3, 4], &[1, 3, 1]], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("sub", &[&[2, 3, 4], &[2, 1, 4]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        case("mul", &[&[2, 3, 4], &[1, 3, 4]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
        case("div", &[&[2, 3], &[2, 3]], |g, v| {
            let d = g.mul(v[1], v[1])?;
            let d = g.add_scalar(d, 0.5)?;
            let y = g.div(v[0], d)?;
            weighted_sum(g, y, 4)
        }),
        case("affine", &[&[3, 4]], |g, v| {
            unary(g, v, |g, x| {
                let y = g.scale(x, -1.7)?;
                g.add_scalar(y, 0.3)
            })
        }),
        kinked(case("relu", &[&[3, 4]], |g, v| unary(g, v, |g, x| g.relu(x)))),
        case("sigmoid", &[&[3, 4]], |g, v| unary(g, v, |g, x| g.sigmoid(x))),
        case("gelu", &[&[3, 4]], |g, v| unary(g, v, |g, x| g.gelu(x))),
        case("exp", &[&[3, 4]], |g, v| unary(g, v, |g, x| g.exp(x))),
        case("log", &[&[3, 4]], |g, v| {
            unary(g, v, |g, x| {
                let y = g.mul(x, x)?;
                let y = g.add_scalar(y, 0.5)?;
                g.log(y)
            })
        }),
        kinked(case("abs", &[&[3, 4]], |g, v| unary(g, v, |g, x| g.abs(x)))),
        case("sqrt", &[&[3, 4]], |g, v| {
            unary(g, v, |g, x| {
                let y = g.mul(x, x)?;
                let y = g.add_scalar(y, 0.5)?;
                g.sqrt(y)
            })
        }),
        kinked(case("clamp", &[&[3, 4]], |g, v| {
            unary(g, v, |g, x| g.clamp(x, -0.5, 0.5))
        })),
        case("matmul", &[&[2, 3, 4], &[4, 5]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 5)
        }),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 6)
        }),
        case("reshape_permute", &[&[2, 3, 4]], |g, v| {
            unary(g, v, |g, x| {
                let y = g.permute(x, &[2, 0, 1])?;
                g.reshape(y, &[4, 6])
            })
        }),
        case("concat_slice", &[&[2, 3], &[2, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.slice(y, 1, 1, 3)?;
            weighted_sum(g, y, 7)
        }),
        case("reduce_sum", &[&[2, 3, 4]], |g, v| {
            unary(g, v, |g, x| g.reduce(x, &[0, 2], ReduceMode::Sum))
        }),
        case("reduce_avg", &[&[2, 3, 4]], |g, v| {
            unary(g, v, |g, x| g.reduce(x, &[1], ReduceMode::Avg))
        }),
        kinked(case("reduce_max", &[&[2, 3, 4]], |g, v| {
            unary(g, v, |g, x| g.reduce(x, &[2], ReduceMode::Max))
        })),
        case("softmax", &[&[2, 5, 3]], |g, v| unary(g, v, |g, x| g.softmax(x, 1))),
        case("log_softmax", &[&[3, 4]], |g, v| {
            unary(g, v, |g, x| g.log_softmax(x, 1))
        }),
        case("layer_norm", &[&[2, 5, 3, 3], &[5], &[5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1, 1e-5)?;
            weighted_sum(g, y, 8)
        }),
        case("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            weighted_sum(g, y, 9)
        }),
        case("conv2d_strided", &[&[1, 2, 6, 5], &[3, 2, 5, 5], &[3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 2, 1)?;
            weighted_sum(g, y, 10)
        }),
        case("conv2d_depthwise", &[&[1, 3, 5, 4], &[3, 1, 3, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1, 3)?;
            weighted_sum(g, y, 12)
        }),
        case("upsample2x", &[&[1, 2, 3, 4]], |g, v| {
            unary(g, v, |g, x| g.upsample2x(x))
        }),
        case("scatter_add", &[&[6, 3]], |g, v| {
            let idx = [0, 4, SENTINEL_DROP, 4, 5, 2];
            unary(g, v, move |g, x| g.scatter_add(x, &idx, 2, 3))
        }),
    ]
}

/// Replaces every parameter with uniform `[-0.5, 0.5]` values so zero
/// initializations do not hide gradients.
pub fn randomize(store: &ParamStore<f32>, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.cast::<f64>();
    for p in out.iter_mut() {
        let t = random_tensor(p.tensor.shape(), &mut rng);
        p.tensor = t.map(|v| 0.5 * v);
    }
    out
}

/// Composite modules stack normalizations whose curvature makes the
/// truncation error at the primitive step reach the tolerance.
pub const MODULE_EPS: f64 = 1e-4;

type ModuleFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

struct ModuleCase {
    name: &'static str,
    kinks: bool,
    build: Box<dyn Fn(u64) -> Result<(ParamStore<f64>, ModuleFn)>>,
}

fn store_with<T>(seed: u64, f: impl FnOnce(&mut Init<'_, ChaCha8Rng>) -> Result<T>) -> Result<(T, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Init::new(&mut store, &mut rng))?;
    Ok((m, randomize(&store, seed ^ 0xabc)))
}

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x1234))
}

fn module_cases() -> Vec<ModuleCase> {
    vec![
        ModuleCase {
            name: "mona_adapter",
            kinks: false,
            build: Box::new(|seed| {
                let (m, ps) = store_with(seed, |i| Mona::new(i, "m", 8, 4))?;
                let x = input(&[1, 8, 5, 4], seed);
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let xv = g.constant(x.clone());
                        let y = m.forward(g, ps, xv)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
        ModuleCase {
            name: "backbone_block",
            kinks: false,
            build: Box::new(|seed| {
                let cfg = BackboneConfig {
                    widths: [8, 8, 8],
                    head_dim: 4,
                    mlp_ratio: 2,
                    mona: true,
                    ..Default::default()
                };
                let (b, ps) = store_with(seed, |i| Block::new(i, "backbone.b", 8, &cfg))?;
                let x = input(&[1, 8, 3, 3], seed);
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let xv = g.constant(x.clone());
                        let y = b.forward(g, ps, xv)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
        ModuleCase {
            name: "sca_apply",
            kinks: true,
            build: Box::new(|seed| {
                let (s, ps) = store_with(seed, |i| Sca::new(i, "sca", 8, 2))?;
                let x = input(&[2, 8, 4, 5], seed);
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let xv = g.constant(x.clone());
                        let y = s.apply(g, ps, xv, true)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
        ModuleCase {
            name: "fuse_convcat",
            kinks: true,
            build: Box::new(|seed| {
                let (f, ps) = store_with(seed, |i| ConvCat::new(i, "fuse", 3, 2, 4))?;
                let a = input(&[1, 3, 4, 4], seed);
                let b = input(&[1, 2, 4, 4], seed + 1);
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
                        let y = f.forward(g, ps, av, bv)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
        ModuleCase {
            name: "pillar_encoder",
            kinks: true,
            build: Box::new(|seed| {
                let (enc, ps) = store_with(seed, |i| PillarEncoder::new(i, "pfn", 6))?;
                let grid = small_grid();
                let pts = input(&[12, 4], seed);
                let pc = PointCloud {
                    points: pts
                        .data()
                        .chunks(4)
                        .map(|p| {
                            [
                                1.6 + 1.5 * p[0] as f32,
                                1.5 * p[1] as f32,
                                p[2] as f32,
                                0.5 + 0.5 * p[3] as f32,
                            ]
                        })
                        .collect(),
                };
                let set = voxelize(&pc, &grid, 4)?;
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let y = enc.forward(g, ps, std::slice::from_ref(&set), &grid)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
        ModuleCase {
            name: "ffn_heads",
            kinks: true,
            build: Box::new(|seed| {
                let (h, ps) = store_with(seed, |i| Heads::new(i, "head", 4, 6, 2))?;
                let x = input(&[1, 4, 4, 4], seed);
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let xv = g.constant(x.clone());
                        let o = h.forward(g, ps, xv)?;
                        let y = g.concat(&[o.cls, o.offset, o.height, o.dim, o.rot], 1)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
        ModuleCase {
            name: "aux_branch",
            kinks: true,
            build: Box::new(|seed| {
                let (a, ps) = store_with(seed, |i| AuxBranch::new(i, "aux", 3, 16))?;
                let x = input(&[1, 3, 8, 8], seed);
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let xv = g.constant(x.clone());
                        let y = a.forward(g, ps, xv)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
        ModuleCase {
            name: "sca_apply_no_saem",
            kinks: true,
            build: Box::new(|seed| {
                let (s, ps) = store_with(seed, |i| Sca::new(i, "sca", 8, 4))?;
                let x = input(&[1, 8, 5, 3], seed);
                Ok((
                    ps,
                    Box::new(move |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
                        let xv = g.constant(x.clone());
                        let y = s.apply(g, ps, xv, false)?;
                        weighted_sum(g, y, seed)
                    }) as ModuleFn,
                ))
            }),
        },
    ]
}

/// 4 x 4 cells of 0.8 m.
fn small_grid() -> BEVGridSpec {
    BEVGridSpec {
        x_range: [0.0, 3.2],
        y_range: [-1.6, 1.6],
        cell: 0.8,
        z_range: [-3.0, 5.0],
    }
}

fn loss_cases() -> Vec<FnCase> {
    vec![
        case("nt_xent_align", &[&[4, 6], &[4, 6]], |g, v| {
            nt_xent_align_loss(
                g,
                &AlignBatch {
                    rgb: v[0],
                    depth: v[1],
                    tau: 0.5,
                },
            )
        }),
        kinked(case("focal_loss", &[&[1, 2, 4, 4]], |g, v| {
            let heat = Tensor::from_fn(vec![1, 2, 4, 4], |k| match k {
                5 | 26 => 1.0,
                _ => ((k * 7) % 10) as f64 / 12.0,
            });
            let h = g.constant(heat);
            focal_loss(g, v[0], h, 2, 2.0, 4.0)
        })),
        kinked(case(
            "detection_loss",
            &[
                &[1, 2, 4, 4],
                &[1, 2, 4, 4],
                &[1, 1, 4, 4],
                &[1, 3, 4, 4],
                &[1, 2, 4, 4],
            ],
            |g, v| {
                let boxes = [
                    Box3D {
                        center: [1.0, 0.3, 0.5],
                        size: [1.2, 0.6, 0.8],
                        yaw: 0.4,
                        class_id: 1,
                        score: None,
                    },
                    Box3D {
                        center: [2.7, -1.1, 0.2],
                        size: [0.9, 0.9, 1.1],
                        yaw: -2.0,
                        class_id: 0,
                        score: None,
                    },
                ];
                let t = render_targets(&boxes, &small_grid(), 2)?;
                let out = HeadOutput {
                    cls: v[0],
                    offset: v[1],
                    height: v[2],
                    dim: v[3],
                    rot: v[4],
                };
                Ok(detection_loss(g, &out, &[t], &LossConfig::default())?.total)
            },
        )),
        case("lift_splat", &[&[2, 3, 2, 3], &[2, 4, 2, 3]], |g, v| {
            let grid = small_grid();
            let cells = (0..24)
                .map(|k| if k % 5 == 4 { SENTINEL_DROP } else { (k * 7) % 16 })
                .collect();
            let index = SplatIndex { cells, dropped: 0 };
            let probs = g.softmax(v[1], 1)?;
            let y = lift_splat(g, v[0], probs, &index, &grid)?;
            weighted_sum(g, y, 13)
        }),
    ]
}

pub fn suite_names() -> Vec<&'static str> {
    let mut v: Vec<&str> = primitive_cases().iter().map(|c| c.name).collect();
    v.extend(loss_cases().iter().map(|c| c.name));
    v.extend(module_cases().iter().map(|c| c.name));
    v
}

/// Runs every case on `instances` random instances. `progress` sees each
/// finished entry.
pub fn gradient_suite(instances: usize, mut progress: impl FnMut(&SuiteEntry)) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let fn_cases = primitive_cases().into_iter().chain(loss_cases());
    for c in fn_cases {
        let opts = CheckOptions {
            allow_kinks: c.kinks,
            ..Default::default()
        };
        let mut reports = Vec::with_capacity(instances);
        for k in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
            let opts = CheckOptions {
                seed: k as u64,
                ..opts.clone()
            };
            reports.push(check_fn(&format!("{}#{k}", c.name), &inputs, &c.f, &opts)?);
        }
        let e = SuiteEntry {
            op: c.name.to_string(),
            reports,
        };
        progress(&e);
        out.push(e);
    }
    for c in module_cases() {
        let mut reports = Vec::with_capacity(instances);
        for k in 0..instances {
            let (ps, f) = (c.build)(2000 + k as u64)?;
            let opts = CheckOptions {
                eps: MODULE_EPS,
                allow_kinks: c.kinks,
                max_coords: 16,
                seed: k as u64,
                ..Default::default()
            };
            reports.push(check_params(&format!("{}#{k}", c.name), &ps, &f, &opts)?);
        }
        let e = SuiteEntry {
            op: c.name.to_string(),
            reports,
        };
        progress(&e);
        out.push(e);
    }
    Ok(out)
}
