//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the algorithms under test; the oracles only
//! share the input and output types.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TIE: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}

/// Plain Euclidean normalization, used to build unit vectors for instances.
pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

// ---------------------------------------------------------------------------
// DBSCAN via union-find over the full distance matrix.

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Labels with the same numbering rule as the library: core components are
/// ranked by their smallest core index, a border point joins the reachable
/// component ranked first, and clusters are then renumbered by smallest member.
pub fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let near: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| dist(&points[i], &points[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = (0..n)
        .map(|i| near[i].iter().filter(|b| **b).count() >= min_pts)
        .collect();
    let mut uf = UnionFind((0..n).collect());
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near[i][j] {
                uf.union(i, j);
            }
        }
    }
    // Union-find roots are the smallest index in each component, and the
    // smallest index of a core component is a core point.
    let mut root: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            root[i] = Some(uf.find(i));
        } else {
            root[i] = (0..n).filter(|&j| core[j] && near[i][j]).map(|j| uf.find(j)).min();
        }
    }
    let mut firsts: Vec<usize> = Vec::new();
    for r in root.iter().flatten() {
        if !firsts.contains(r) {
            firsts.push(*r);
        }
    }
    // Renumber by smallest member index.
    let mut order: Vec<(usize, usize)> = firsts
        .iter()
        .map(|r| (root.iter().position(|x| *x == Some(*r)).unwrap(), *r))
        .collect();
    order.sort();
    root.iter()
        .map(|r| r.map(|r| order.iter().position(|(_, x)| *x == r).unwrap()))
        .collect()
}

// ---------------------------------------------------------------------------
// Consensus rule text, evaluated by exhaustive comparison.

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub members: Vec<usize>,
    pub representative: usize,
    pub fallback: bool,
}

fn groups(labels: &[Option<usize>]) -> Vec<Vec<usize>> {
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    (0..k)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == Some(c)).collect())
        .collect()
}

fn mean_pair_dist(points: &[Vec<f64>], members: &[usize]) -> f64 {
    let mut pairs = Vec::new();
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            pairs.push(dist(&points[i], &points[j]));
        }
    }
    if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().sum::<f64>() / pairs.len() as f64
    }
}

/// Among scores within the tie tolerance of the best, prefer the shorter
/// text, then the smaller client id, then the earlier position.
fn pick(scores: &[(usize, f64)], lens: &[u64], ids: &[u32]) -> usize {
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    scores
        .iter()
        .filter(|s| s.1 - best < TIE)
        .map(|s| s.0)
        .min_by_key(|&i| (lens[i], ids[i], i))
        .unwrap()
}

pub fn centroid_consensus_oracle(
    points: &[Vec<f64>],
    lens: &[u64],
    ids: &[u32],
    eps: f64,
    min_pts: usize,
) -> OracleOutcome {
    let labels = dbscan_oracle(points, eps, min_pts);
    let gs = groups(&labels);
    let (members, fallback) = if gs.is_empty() {
        ((0..points.len()).collect::<Vec<_>>(), true)
    } else {
        let largest = gs.iter().map(Vec::len).max().unwrap();
        let sized: Vec<&Vec<usize>> = gs.iter().filter(|g| g.len() == largest).collect();
        let spreads: Vec<f64> = sized.iter().map(|g| mean_pair_dist(points, g)).collect();
        let tight = spreads.iter().copied().fold(f64::INFINITY, f64::min);
        let chosen = sized
            .iter()
            .zip(&spreads)
            .filter(|(_, s)| **s - tight < TIE)
            .map(|(g, _)| *g)
            .min_by_key(|g| g.iter().min().copied())
            .unwrap();
        (chosen.clone(), false)
    };
    let d = points[0].len();
    let mut sum = vec![0.0; d];
    for &i in &members {
        for (s, v) in sum.iter_mut().zip(&points[i]) {
            *s += v;
        }
    }
    let norm = dot(&sum, &sum).sqrt();
    let representative = if norm < 1e-12 {
        medoid(points, &members, lens, ids)
    } else {
        let c: Vec<f64> = sum.iter().map(|x| x / norm).collect();
        let scores: Vec<(usize, f64)> = members.iter().map(|&i| (i, dist(&points[i], &c))).collect();
        pick(&scores, lens, ids)
    };
    OracleOutcome {
        members,
        representative,
        fallback,
    }
}

pub fn medoid(points: &[Vec<f64>], members: &[usize], lens: &[u64], ids: &[u32]) -> usize {
    let scores: Vec<(usize, f64)> = members
        .iter()
        .map(|&i| {
            let others: Vec<f64> = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist(&points[i], &points[j]))
                .collect();
            let mean = if others.is_empty() {
                0.0
            } else {
                others.iter().sum::<f64>() / others.len() as f64
            };
            (i, mean)
        })
        .collect();
    pick(&scores, lens, ids)
}

// ---------------------------------------------------------------------------
// Random instances.

pub struct Instance {
    pub points: Vec<Vec<f64>>,
    pub texts: Vec<String>,
    pub ids: Vec<u32>,
    pub eps: f64,
    pub min_pts: usize,
}

/// Points drawn around a few random centres, with occasional exact
/// duplicates and equal text lengths so the tie rules get exercised.
pub fn random_instance(rng: &mut ChaCha8Rng, max_k: usize, dim: usize) -> Instance {
    let k = rng.random_range(1..=max_k);
    let centres: Vec<Vec<f64>> = (0..rng.random_range(1..=3))
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let spread = [0.02, 0.2, 0.6][rng.random_range(0..3)];
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        if !points.is_empty() && rng.random_bool(0.15) {
            let j = rng.random_range(0..points.len());
            points.push(points[j].clone());
            continue;
        }
        let c = &centres[rng.random_range(0..centres.len())];
        let mut v: Vec<f64> = c.iter().map(|x| x + rng.random_range(-spread..spread)).collect();
        if dot(&v, &v) < 1e-6 {
            v[0] += 1.0;
        }
        points.push(unit(&v));
    }
    let texts = (0..k)
        .map(|i| char::from(b'a' + i as u8).to_string().repeat(rng.random_range(1..4)))
        .collect();
    let mut ids: Vec<u32> = Vec::with_capacity(k);
    let mut next = rng.random_range(0..3);
    for _ in 0..k {
        ids.push(next);
        next += rng.random_range(1..4);
    }
    Instance {
        points,
        texts,
        ids,
        eps: [0.05, 0.1, 0.3, 0.6, 1.0][rng.random_range(0..5)],
        min_pts: rng.random_range(1..=3),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Binary fixed-point arithmetic on big integers: value = raw / 2^PREC.

pub const PREC: u32 = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Fixed(BigInt);

impl Fixed {
    pub fn from_f64(x: f64) -> Fixed {
        assert!(x.is_finite());
        if x == 0.0 {
            return Fixed(BigInt::zero());
        }
        let bits = x.abs().to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let mant = if exp == 0 {
            bits & ((1 << 52) - 1)
        } else {
            (bits & ((1 << 52) - 1)) | (1 << 52)
        };
        let e = if exp == 0 { -1074 } else { exp - 1075 } + PREC as i64;
        let mut v = BigInt::from(mant);
        v = if e >= 0 { v << e as u32 } else { v >> (-e) as u32 };
        Fixed(if x < 0.0 { -v } else { v })
    }

    pub fn from_u64(x: u64) -> Fixed {
        Fixed(BigInt::from(x) << PREC)
    }

    pub fn to_f64(&self) -> f64 {
        let bits = self.0.bits() as i64;
        // Keep 64 significant bits, then scale exactly.
        let shift = (bits - 64).max(0);
        let top = (&self.0 >> shift as u32).to_f64().unwrap();
        top * 2f64.powi((shift - PREC as i64) as i32)
    }

    pub fn add(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 + &o.0)
    }

    pub fn sub(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 - &o.0)
    }

    pub fn mul(&self, o: &Fixed) -> Fixed {
        Fixed((&self.0 * &o.0) >> PREC)
    }

    pub fn div(&self, o: &Fixed) -> Fixed {
        Fixed((&self.0 << PREC) / &o.0)
    }

    pub fn sqrt(&self) -> Fixed {
        assert!(!self.0.is_negative());
        Fixed((&self.0 << PREC).sqrt())
    }

    fn one() -> Fixed {
        Fixed(BigInt::one() << PREC)
    }

    /// `2 atanh(z)` for `|z| <= 1/3` by its Taylor series.
    fn two_atanh(z: &Fixed) -> Fixed {
        let z2 = z.mul(z);
        let mut term = z.clone();
        let mut sum = Fixed(BigInt::zero());
        let mut k = 1u64;
        while !term.0.is_zero() {
            sum = sum.add(&Fixed(&term.0 / BigInt::from(k)));
            term = term.mul(&z2);
            k += 2;
        }
        Fixed(sum.0 << 1)
    }

    pub fn ln(&self) -> Fixed {
        assert!(self.0.is_positive());
        // x = m 2^k with m in [1, 2).
        let k = self.0.bits() as i64 - 1 - PREC as i64;
        let m = if k >= 0 {
            Fixed(&self.0 >> k as u32)
        } else {
            Fixed(&self.0 << (-k) as u32)
        };
        let one = Fixed::one();
        let ln_m = Fixed::two_atanh(&m.sub(&one).div(&m.add(&one)));
        let third = one.div(&Fixed::from_u64(3));
        let ln2 = Fixed::two_atanh(&third);
        let k_ln2 = Fixed(&ln2.0 * BigInt::from(k));
        ln_m.add(&k_ln2)
    }
}

/// Gap formula evaluated in fixed point from the exact binary values of the inputs.
pub fn delta_oracle(g: f64, tau: f64, eta: f64, b: u64, d: u64, t: u64, rho: f64) -> Fixed {
    let g = Fixed::from_f64(g);
    let two = Fixed::from_u64(2);
    let shift = g.mul(&two.mul(&Fixed::from_f64(tau)).sqrt());
    let noise = two.mul(&g).mul(&Fixed::from_f64(eta));
    let log_term = Fixed::from_u64(d)
        .mul(&Fixed::from_u64(5).ln())
        .add(&two.mul(&Fixed::from_u64(t)).div(&Fixed::from_f64(rho)).ln());
    let sampling = Fixed::from_u64(4)
        .mul(&g)
        .mul(&two.div(&Fixed::from_u64(b)).mul(&log_term).sqrt());
    shift.add(&noise).add(&sampling)
}

#[allow(clippy::too_many_arguments)]
pub fn rhs_oracle(
    delta: &Fixed,
    smoothness: f64,
    step: f64,
    t: u64,
    sigma2: f64,
    zeta2: f64,
    init_gap: f64,
) -> Fixed {
    let step = Fixed::from_f64(step);
    let opt = Fixed::from_u64(4)
        .mul(&Fixed::from_f64(init_gap))
        .div(&step.mul(&Fixed::from_u64(t)));
    let var = Fixed::from_f64(sigma2).add(&Fixed::from_f64(zeta2).div(&Fixed::from_u64(4)));
    let noise = Fixed::from_u64(2).mul(&Fixed::from_f64(smoothness)).mul(&step).mul(&var);
    let bias = Fixed::from_u64(3).mul(delta).mul(delta).div(&Fixed::from_u64(4));
    opt.add(&noise).add(&bias)
}

pub fn rel_err(got: f64, want: &Fixed) -> f64 {
    let w = want.to_f64();
    if w == 0.0 {
        got.abs()
    } else {
        ((got - w) / w).abs()
    }
}
