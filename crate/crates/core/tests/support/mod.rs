//! Random validated problem instances shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use bspde::coefficients::{self, Coef, CoefficientSet};
use bspde::expr::{self, Env};
use bspde::grid::{make_grid, Domain, Grid, SpaceField, SpaceTimeField};
use bspde::nonlocal::{validate_spec, GammaOperator, KernelEntry, KernelTable, NonlocalSpec, TimeKernel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Instance {
    pub grid: Arc<Grid>,
    pub coeffs: CoefficientSet,
    pub spec: NonlocalSpec,
    pub op: GammaOperator,
    pub xi: SpaceField,
    pub phi: Option<SpaceTimeField>,
}

impl Instance {
    pub fn sup_phi(&self) -> f64 {
        self.phi.as_ref().map_or(0.0, |p| p.sup_norm())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_nx_1d: usize,
    pub max_nx_2d: usize,
    pub p_2d: f64,
    pub max_nt: usize,
}

pub const SMALL: Shape = Shape {
    max_nx_1d: 31,
    max_nx_2d: 11,
    p_2d: 0.25,
    max_nt: 40,
};

fn c(text: &str) -> Coef {
    Coef::parse(text).unwrap()
}

pub fn random_grid(r: &mut ChaCha8Rng, shape: Shape) -> Arc<Grid> {
    let nt = r.random_range(10..=shape.max_nt);
    let horizon = r.random_range(0.5..2.0);
    let g = if r.random_bool(shape.p_2d) {
        let (lx, ly) = (r.random_range(0.7..1.5), r.random_range(0.7..1.5));
        let n = r.random_range(7..=shape.max_nx_2d);
        make_grid(Domain::new(&[0.0, -0.5], &[lx, ly - 0.5]).unwrap(), &[n, n], nt, horizon).unwrap()
    } else {
        let lo = r.random_range(-1.0..0.5);
        let len = r.random_range(0.5..2.0);
        let n = r.random_range(11..=shape.max_nx_1d);
        make_grid(Domain::interval(lo, lo + len).unwrap(), &[n], nt, horizon).unwrap()
    };
    Arc::new(g)
}

/// Random coefficients with `lam <= 0`; with `monotone` there is no mixed
/// term, so the stencil is an M-matrix.
pub fn random_coeffs(r: &mut ChaCha8Rng, g: &Grid, monotone: bool) -> CoefficientSet {
    let dim = g.dim();
    let lo: Vec<f64> = (0..dim).map(|a| g.domain().lo(a)).collect();
    let hi: Vec<f64> = (0..dim).map(|a| g.domain().hi(a)).collect();
    // bump vanishing on the walls
    let bump = (0..dim)
        .map(|a| format!("sin(pi*(x{}-({}))/{})", a + 1, lo[a], hi[a] - lo[a]))
        .collect::<Vec<_>>()
        .join("*");
    loop {
        let b0: f64 = r.random_range(0.05..0.5);
        let amp = r.random_range(0.0..0.4);
        let wiggle = if r.random_bool(0.5) {
            format!("{b0}*(1+{amp}*sin(3*x1))")
        } else {
            format!("{b0}*(1+{amp}*sin(2*t))")
        };
        let mut b = vec![vec![Coef::Const(0.0); dim]; dim];
        b[0][0] = c(&wiggle);
        if dim == 2 {
            let b22 = r.random_range(0.05..0.5);
            b[1][1] = Coef::Const(b22);
            let cap = 0.5 * (b0 * (1.0 - amp)).min(b22);
            let off = if monotone { 0.0 } else { r.random_range(-cap..cap) };
            b[0][1] = Coef::Const(off);
            b[1][0] = Coef::Const(off);
        }
        let f: Vec<Coef> = (0..dim)
            .map(|_| match r.random_range(0..3) {
                0 => Coef::Const(0.0),
                1 => Coef::Const(r.random_range(-1.0..1.0)),
                _ => c(&format!("{}*cos(2*x1+t)", r.random_range(-1.0..1.0))),
            })
            .collect();
        let lam = match r.random_range(0..3) {
            0 => Coef::Const(0.0),
            1 => Coef::Const(-r.random_range(0.0..1.0)),
            _ => c(&format!("-{}*(1+x1*x1)", r.random_range(0.0..0.5))),
        };
        let beta = if r.random_bool(0.4) {
            let s = r.random_range(0.0..(b0 * (1.0 - amp)).sqrt());
            let mut col = vec![Coef::Const(0.0); dim];
            col[0] = c(&format!("{s}*{bump}"));
            vec![col]
        } else {
            Vec::new()
        };
        let set = CoefficientSet::new(dim, b, f, lam, beta).unwrap();
        if !coefficients::validate(&set, g).unwrap().violated {
            return set;
        }
    }
}

fn random_simple(r: &mut ChaCha8Rng, g: &Grid, budget: f64) -> NonlocalSpec {
    let t_max = 0.9 * g.horizon();
    match r.random_range(0..4) {
        0 => NonlocalSpec::InitialValue {
            kappa: r.random_range(-budget..budget),
        },
        1 => NonlocalSpec::PointInTime {
            kappa: r.random_range(-budget..budget),
            t1: r.random_range(0.0..t_max),
        },
        2 => {
            let a1 = r.random_range(-budget..budget);
            let rest = budget - a1.abs();
            NonlocalSpec::TwoPoint {
                alpha1: a1,
                t1: r.random_range(0.0..t_max),
                alpha2: r.random_range(-rest..=rest),
                t2: r.random_range(0.0..t_max),
            }
        }
        _ => {
            let theta = r.random_range(0.1..0.9) * g.horizon();
            // max |k| <= 1.5 scale, and the trapezoid of |k| <= theta * max |k|
            let scale = r.random_range(0.1..budget) / (1.5 * theta);
            let k = if r.random_bool(0.5) {
                TimeKernel::Expr(expr::parse(&format!("{scale}*(1+0.5*sin(5*t))")).unwrap())
            } else {
                TimeKernel::Constant(scale)
            };
            NonlocalSpec::TimeKernel { theta, k }
        }
    }
}

/// Gaussian-in-space kernel on every level up to `theta`, scaled so that the
/// discrete operator norm equals `norm`.
pub fn space_time_kernel(g: &Grid, theta: f64, norm: f64) -> NonlocalSpec {
    let (last, _) = g.snap_time(theta);
    assert!(last >= 1);
    let n = g.n_interior();
    let mut entries = Vec::new();
    let mut mass = vec![0.0; n];
    for k in 0..=last {
        let t = g.time(k);
        let w = if k == 0 || k == last { 0.5 * g.dt() } else { g.dt() } * g.cell_volume();
        for (i, m) in mass.iter_mut().enumerate() {
            let x = g.interior_point(i);
            for j in 0..n {
                let y = g.interior_point(j);
                let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
                let v = (1.0 + t) * (-d2 / 0.05).exp();
                *m += w * v;
                entries.push(KernelEntry { t, x, y, k: v });
            }
        }
    }
    let s = norm / mass.iter().fold(0.0f64, |a, &b| a.max(b));
    entries.iter_mut().for_each(|e| e.k *= s);
    NonlocalSpec::SpaceTimeKernel {
        theta,
        table: KernelTable { dim: g.dim(), entries },
    }
}

pub fn random_spec(r: &mut ChaCha8Rng, g: &Grid) -> NonlocalSpec {
    let budget = r.random_range(0.3..0.95);
    match r.random_range(0..6) {
        0..=3 => random_simple(r, g, budget),
        4 => {
            let theta = r.random_range(0.15..0.4) * g.horizon();
            space_time_kernel(g, theta, budget)
        }
        _ => {
            let w1 = r.random_range(0.1..0.6);
            let w2 = r.random_range(0.1..(1.0 - w1));
            NonlocalSpec::Convex {
                weights: vec![w1, w2],
                parts: vec![random_simple(r, g, budget), random_simple(r, g, budget)],
            }
        }
    }
}

pub fn random_data(r: &mut ChaCha8Rng, g: &Arc<Grid>, with_source: bool) -> (SpaceField, Option<SpaceTimeField>) {
    let dim = g.dim();
    let lo: Vec<f64> = (0..dim).map(|a| g.domain().lo(a)).collect();
    let hi: Vec<f64> = (0..dim).map(|a| g.domain().hi(a)).collect();
    let modes: Vec<(f64, [u32; 2])> = (0..3)
        .map(|_| (r.random_range(-1.5..1.5), [r.random_range(1..4), r.random_range(1..4)]))
        .collect();
    let xi = SpaceField::from_fn(g.clone(), |x| {
        Ok::<_, ()>(
            modes
                .iter()
                .map(|(a, k)| {
                    a * (0..dim)
                        .map(|ax| (k[ax] as f64 * std::f64::consts::PI * (x[ax] - lo[ax]) / (hi[ax] - lo[ax])).sin())
                        .product::<f64>()
                })
                .sum(),
        )
    })
    .unwrap();
    let phi = if with_source {
        let e = expr::parse(&format!(
            "{}*cos(3*x1 - 2*t) + {}",
            r.random_range(-2.0..2.0),
            r.random_range(-1.0..1.0)
        ))
        .unwrap();
        Some(SpaceTimeField::from_fn(g.clone(), |x, t| e.eval(&Env::at(x, t))).unwrap())
    } else {
        None
    };
    (xi, phi)
}

/// A validated random instance; resamples until the operator validates.
pub fn random_instance(r: &mut ChaCha8Rng, shape: Shape, monotone: bool) -> Instance {
    let grid = random_grid(r, shape);
    let coeffs = random_coeffs(r, &grid, monotone);
    let (spec, op) = loop {
        let spec = random_spec(r, &grid);
        if let Ok(op) = validate_spec(&spec, &grid) {
            break (spec, op);
        }
    };
    let with_source = r.random_bool(0.6);
    let (xi, phi) = random_data(r, &grid, with_source);
    Instance {
        grid,
        coeffs,
        spec,
        op,
        xi,
        phi,
    }
}
