//! Exact minimization of the selection energy by s-t min-cut, an
//! exhaustive reference solver, and the λ sweep.
//!
//! Reduction, per class. With `a_ij = λ w_ij <= 0`,
//!
//! ```text
//! a_ij α_i α_j = a_ij α_i + (-a_ij) α_i (1 - α_j)
//! ```
//!
//! so every pair contributes an arc `i -> j` of capacity `-a_ij` (paid when
//! `i` is selected and `j` is not) and shifts `a_ij` onto face `i`'s linear
//! coefficient. A nonnegative coefficient becomes an arc `i -> sink`; a
//! negative one becomes `source -> i` with its value moved into a constant.
//! Selected faces are the source side, and `cut + constant == energy`.
//!
//! The residual-reachable set after max-flow is the inclusion-minimal
//! optimum. Minimizers of a submodular function are closed under
//! intersection, so this is also the optimum with the fewest selected
//! faces, and it is unique.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, ParseErrorKind, Result};
use crate::maxflow::FlowNetwork;
use crate::selgraph::{check_lambda, energy, SelectionGraph, SelectionMask};

/// Largest class the exhaustive solver enumerates.
pub const BRUTE_FORCE_MAX_CLASS: usize = 20;

const MASK_MAGIC: &str = "SKDMASK1";

/// The flow network for one class at one λ, with its constant offset.
#[derive(Debug, Clone)]
pub struct CutConstruction {
    faces: Vec<usize>,
    arcs: Vec<(usize, usize, f64)>,
    constant: f64,
}

impl CutConstruction {
    pub fn for_class(graph: &SelectionGraph, class: usize, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if !lambda.is_finite() {
            return Err(Error::NonFinite("lambda".into()));
        }
        let faces = graph.class_members(class).to_vec();
        let k = faces.len();
        let (source, sink) = (k, k + 1);
        let local = |global: usize| faces.binary_search(&global).expect("edge endpoint in class");

        let mut coef: Vec<f64> = faces.iter().map(|&i| graph.unary()[i]).collect();
        let mut arcs = Vec::new();
        for e in graph.class_edges(class) {
            let a = lambda * e.weight;
            if a == 0.0 {
                continue;
            }
            let (li, lj) = (local(e.i), local(e.j));
            coef[li] += a;
            arcs.push((li, lj, -a));
        }
        let mut constant = 0.0;
        for (i, &c) in coef.iter().enumerate() {
            if c > 0.0 {
                arcs.push((i, sink, c));
            } else if c < 0.0 {
                arcs.push((source, i, -c));
                constant += c;
            }
        }
        if arcs.iter().any(|a| !a.2.is_finite()) {
            return Err(Error::NonFinite(format!("cut capacities of class {}", class + 1)));
        }
        Ok(Self { faces, arcs, constant })
    }

    /// Offset added to a cut value to recover the energy.
    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// Capacity of the cut whose source side is the source plus every face
    /// with `local_alpha[k]` set.
    pub fn cut_value(&self, local_alpha: &[bool]) -> f64 {
        let k = self.faces.len();
        let on_source = |v: usize| v == k || (v < k && local_alpha[v]);
        self.arcs
            .iter()
            .filter(|&&(u, v, _)| on_source(u) && !on_source(v))
            .map(|a| a.2)
            .sum()
    }

    /// Global face indices in local order.
    pub fn faces(&self) -> &[usize] {
        &self.faces
    }

    /// Returns the minimal optimal local labeling and the max-flow value.
    pub fn solve(&self) -> (Vec<bool>, f64) {
        let k = self.faces.len();
        let mut net = FlowNetwork::new(k + 2);
        for &(u, v, c) in &self.arcs {
            net.add_arc(u, v, c);
        }
        let flow = net.max_flow(k, k + 1);
        let side = net.source_side(k);
        (side[..k].to_vec(), flow)
    }
}

fn check_graph_finite(graph: &SelectionGraph) -> Result<()> {
    if graph.unary().iter().any(|u| !u.is_finite()) || graph.edges().iter().any(|e| !e.weight.is_finite()) {
        return Err(Error::NonFinite("selection graph weights".into()));
    }
    Ok(())
}

/// Global minimizer of the selection energy with the fewest selected faces.
pub fn minimize(graph: &SelectionGraph, lambda: f64) -> Result<(SelectionMask, f64)> {
    check_lambda(lambda)?;
    check_graph_finite(graph)?;
    let mut mask = SelectionMask::empty(graph.n_faces());
    for c in 0..graph.n_classes() {
        let cut = CutConstruction::for_class(graph, c, lambda)?;
        let (local, _) = cut.solve();
        for (&face, sel) in cut.faces().iter().zip(local) {
            mask.alpha[face] = sel;
        }
    }
    let e = energy(graph, &mask, lambda)?;
    Ok((mask, e))
}

/// Whether `a` beats `b` under the canonical tie-break: fewer selected,
/// then unselected at the lowest index where they differ.
fn canonical_before(a: u32, b: u32) -> bool {
    match a.count_ones().cmp(&b.count_ones()) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let diff = a ^ b;
            diff != 0 && a & (diff & diff.wrapping_neg()) == 0
        }
    }
}

/// Exhaustive per-class enumeration. Reference semantics for [`minimize`].
pub fn brute_force_minimize(graph: &SelectionGraph, lambda: f64) -> Result<(SelectionMask, f64)> {
    check_lambda(lambda)?;
    check_graph_finite(graph)?;
    let mut mask = SelectionMask::empty(graph.n_faces());
    for c in 0..graph.n_classes() {
        let faces = graph.class_members(c);
        let k = faces.len();
        if k > BRUTE_FORCE_MAX_CLASS {
            return Err(Error::ClassTooLarge {
                class: c + 1,
                size: k,
                max: BRUTE_FORCE_MAX_CLASS,
            });
        }
        let unary: Vec<f64> = faces.iter().map(|&i| graph.unary()[i]).collect();
        let pairs: Vec<(usize, usize, f64)> = graph
            .class_edges(c)
            .map(|e| {
                let li = faces.binary_search(&e.i).unwrap();
                let lj = faces.binary_search(&e.j).unwrap();
                (li, lj, e.weight)
            })
            .collect();
        let scale = 1.0 + unary.iter().sum::<f64>() + lambda.abs() * pairs.iter().map(|p| p.2).sum::<f64>();
        let tol = 1e-12 * scale;

        let mut best = (0u32, 0.0f64);
        for bits in 1u32..(1u32 << k) {
            let sel = |i: usize| bits >> i & 1 == 1;
            let u: f64 = (0..k).filter(|&i| sel(i)).map(|i| unary[i]).sum();
            let p: f64 = pairs.iter().filter(|p| sel(p.0) && sel(p.1)).map(|p| p.2).sum();
            let e = u + lambda * p;
            if e < best.1 - tol || (e <= best.1 + tol && canonical_before(bits, best.0)) {
                best = (bits, e);
            }
        }
        for (i, &face) in faces.iter().enumerate() {
            mask.alpha[face] = best.0 >> i & 1 == 1;
        }
    }
    let e = energy(graph, &mask, lambda)?;
    Ok((mask, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepEntry {
    pub lambda: f64,
    pub selected_count: usize,
    pub optimal_energy: f64,
    pub pairwise_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    /// Checks the parametric properties: entries ascending in λ, reward
    /// nonincreasing, optimal energy nondecreasing and never positive.
    pub fn check_monotone(&self) -> std::result::Result<(), String> {
        for (k, e) in self.entries.iter().enumerate() {
            if e.optimal_energy > 0.0 {
                return Err(format!("positive optimal energy {} at λ={}", e.optimal_energy, e.lambda));
            }
            if k == 0 {
                continue;
            }
            let prev = &self.entries[k - 1];
            if prev.lambda > e.lambda {
                return Err(format!("λ not ascending at entry {k}"));
            }
            if e.pairwise_reward > prev.pairwise_reward {
                return Err(format!(
                    "pairwise reward rose from {} to {} between λ={} and λ={}",
                    prev.pairwise_reward, e.pairwise_reward, prev.lambda, e.lambda
                ));
            }
            if e.optimal_energy < prev.optimal_energy {
                return Err(format!(
                    "optimal energy fell from {} to {} between λ={} and λ={}",
                    prev.optimal_energy, e.optimal_energy, prev.lambda, e.lambda
                ));
            }
        }
        Ok(())
    }

    /// CSV with header `lambda,count,energy,pairwise_reward`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "lambda,count,energy,pairwise_reward")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.lambda, e.selected_count, e.optimal_energy, e.pairwise_reward)?;
        }
        Ok(())
    }
}

/// `-2^13, ..., -2^0, 0`.
pub fn default_grid() -> Vec<f64> {
    pow2_grid(13, true)
}

fn pow2_grid(max_exp: u32, with_zero: bool) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=max_exp).rev().map(|k| -(2f64.powi(k as i32))).collect();
    if with_zero {
        grid.push(0.0);
    }
    grid
}

/// Parses `pow2:-8192..0` (negative powers of two down to -1, plus 0 when
/// the upper bound is 0) or a comma-separated list of values.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Invalid(format!("bad grid `{spec}`"));
    let mut grid = if let Some(range) = spec.strip_prefix("pow2:") {
        let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        if !(lo <= -1.0 && hi <= 0.0 && lo <= hi) {
            return Err(bad());
        }
        let max_exp = (-lo).log2();
        if max_exp.fract() != 0.0 {
            return Err(Error::Invalid(format!("grid bound {lo} is not a negative power of two")));
        }
        let mut grid = pow2_grid(max_exp as u32, hi == 0.0);
        grid.retain(|&l| l <= hi);
        grid
    } else {
        spec.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    for &l in &grid {
        check_lambda(l)?;
    }
    grid.sort_by(f64::total_cmp);
    Ok(grid)
}

/// Solves every λ (in parallel) and reports the results sorted by λ.
pub fn lambda_sweep(graph: &SelectionGraph, lambdas: &[f64]) -> Result<SweepResult> {
    let mut entries = lambdas
        .par_iter()
        .map(|&lambda| {
            let (mask, optimal_energy) = minimize(graph, lambda)?;
            Ok(SweepEntry {
                lambda,
                selected_count: mask.selected_count(),
                optimal_energy,
                pairwise_reward: graph.pairwise_reward(&mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(SweepResult { entries })
}

pub fn write_mask<W: Write>(mask: &SelectionMask, lambda: f64, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{MASK_MAGIC} {} {lambda}", mask.len())?;
    for (i, &a) in mask.alpha.iter().enumerate() {
        writeln!(w, "{i},{}", u8::from(a))?;
    }
    Ok(())
}

pub fn save_mask(mask: &SelectionMask, lambda: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_mask(mask, lambda, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses a mask file, returning the mask and the λ it was solved at.
pub fn read_mask<R: BufRead>(reader: R) -> Result<(SelectionMask, f64)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, ParseErrorKind::UnexpectedEof))?
        .map_err(|e| Error::io("<reader>", e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let header_err = || Error::parse(1, ParseErrorKind::Header(header.clone()));
    if fields.len() != 3 || fields[0] != MASK_MAGIC {
        return Err(header_err());
    }
    let n: usize = fields[1].parse().map_err(|_| header_err())?;
    let lambda: f64 = fields[2].parse().map_err(|_| header_err())?;
    let mut alpha = Vec::with_capacity(n);
    for i in 0..n {
        let line_no = i + 2;
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(line_no, ParseErrorKind::UnexpectedEof))?
            .map_err(|e| Error::io("<reader>", e))?;
        let (id, a) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(line_no, ParseErrorKind::BadToken(line.clone())))?;
        if id.trim().parse::<usize>().ok() != Some(i) {
            return Err(Error::parse(line_no, ParseErrorKind::Structure(format!("expected id {i}"))));
        }
        alpha.push(match a.trim() {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(line_no, ParseErrorKind::BadToken(other.to_string()))),
        });
    }
    Ok((SelectionMask { alpha }, lambda))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<(SelectionMask, f64)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_mask(BufReader::new(file))
}
