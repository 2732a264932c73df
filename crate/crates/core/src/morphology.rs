//! Branched compartment trees and the asymmetric axial couplings that
//! discretize the diffusion term of the cable equation.
//!
//! Every compartment is a cylinder of radius `a` and length `h`. A compartment
//! `j` couples to its parent with rate `c1 = (a_j^2 / a_j) / (2 r_L c_m h^2)` and
//! to each child `q` with rate `c2 = (a_q^2 / a_j) / (2 r_L c_m h^2)`, where the
//! specific properties are those of `j`. The resistances are one-sided, so the
//! coupling matrix is not symmetric when neighboring radii differ.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MorphologyError {
    #[error("morphology has no compartments")]
    Empty,
    #[error("compartment {id} is part of a parent cycle")]
    CycleDetected { id: usize },
    #[error("compartments {first} and {second} both lack a parent")]
    MultipleRoots { first: usize, second: usize },
    #[error("compartment {id} names parent {parent}, which does not exist")]
    DanglingParent { id: usize, parent: usize },
    #[error("compartment id {id} appears more than once")]
    DuplicateId { id: usize },
    #[error("compartment ids must be 0..{count} without gaps; found {id}")]
    NonContiguousIds { id: usize, count: usize },
    #[error("compartment {id} has parent {parent}; parents must carry a smaller id")]
    NotTopological { id: usize, parent: usize },
    #[error("compartment {id}: {field} must be positive and finite, got {value}")]
    InvalidParameter {
        id: usize,
        field: &'static str,
        value: f64,
    },
    #[error("morphology config: {0}")]
    Config(String),
}

/// One cylindrical compartment, all quantities in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compartment {
    pub id: usize,
    pub parent: Option<usize>,
    /// Radius `a` in meters.
    pub radius: f64,
    /// Length `h` in meters.
    pub length: f64,
    /// Specific membrane capacitance, F/m^2.
    pub c_m: f64,
    /// Specific membrane resistance, ohm m^2.
    pub r_m: f64,
    /// Specific axial resistance, ohm m.
    pub r_l: f64,
    /// Leak reversal potential, volts.
    pub e_leak: f64,
}

impl Compartment {
    /// Lateral membrane area of the cylinder, m^2.
    pub fn area(&self) -> f64 {
        2.0 * PI * self.radius * self.length
    }

    /// Absolute membrane capacitance `C_m`, farads.
    pub fn capacitance(&self) -> f64 {
        self.c_m * self.area()
    }

    /// Leak rate `alpha = 1 / (r_m c_m)`, 1/s.
    pub fn leak_rate(&self) -> f64 {
        1.0 / (self.r_m * self.c_m)
    }

    fn validate(&self) -> Result<(), MorphologyError> {
        let checks = [
            ("radius", self.radius),
            ("length", self.length),
            ("c_m", self.c_m),
            ("r_m", self.r_m),
            ("r_l", self.r_l),
        ];
        for (field, value) in checks {
            if !(value.is_finite() && value > 0.0) {
                return Err(MorphologyError::InvalidParameter {
                    id: self.id,
                    field,
                    value,
                });
            }
        }
        if !self.e_leak.is_finite() {
            return Err(MorphologyError::InvalidParameter {
                id: self.id,
                field: "e_leak",
                value: self.e_leak,
            });
        }
        Ok(())
    }
}

/// A validated compartment tree. Compartment `i` sits at index `i` and every
/// parent id is smaller than its child's id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorphologyTree {
    compartments: Vec<Compartment>,
    children: Vec<Vec<usize>>,
}

impl MorphologyTree {
    pub fn len(&self) -> usize {
        self.compartments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compartments.is_empty()
    }

    pub fn compartments(&self) -> &[Compartment] {
        &self.compartments
    }

    pub fn compartment(&self, id: usize) -> &Compartment {
        &self.compartments[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.compartments[id].parent
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn edge_count(&self) -> usize {
        self.compartments.len() - 1
    }

    /// Ids from `id` up to the root, inclusive on both ends.
    pub fn path_to_root(&self, mut id: usize) -> Vec<usize> {
        let mut path = vec![id];
        while let Some(p) = self.parent(id) {
            path.push(p);
            id = p;
        }
        path
    }

    fn deepest_leaf(&self, start: usize) -> (usize, usize) {
        // (depth, leaf); ties go to the smaller id so the choice is stable.
        let mut best = (0usize, start);
        let mut stack = vec![(start, 0usize)];
        while let Some((node, depth)) = stack.pop() {
            if self.children[node].is_empty()
                && (depth > best.0 || (depth == best.0 && node < best.1))
            {
                best = (depth, node);
            }
            for &c in &self.children[node] {
                stack.push((c, depth + 1));
            }
        }
        best
    }

    /// The longest tip-to-tip chain passing through the root (soma): the deepest
    /// leaf of one root subtree, up through the root, and down to the deepest
    /// leaf of another subtree.
    pub fn tip_to_tip_path(&self) -> Vec<usize> {
        let root = self.root();
        let mut arms: Vec<(usize, usize)> = self.children[root]
            .iter()
            .map(|&c| self.deepest_leaf(c))
            .collect();
        arms.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        match arms.as_slice() {
            [] => vec![root],
            [(_, leaf)] => {
                let mut p = self.path_to_root(*leaf);
                p.reverse();
                p
            }
            [(_, first), (_, second), ..] => {
                let mut path = self.path_to_root(*first);
                let mut down = self.path_to_root(*second);
                down.pop(); // the root is already on `path`
                down.reverse();
                path.extend(down);
                path
            }
        }
    }
}

/// Validate compartment descriptions and assemble the child adjacency.
pub fn build_tree(descriptions: Vec<Compartment>) -> Result<MorphologyTree, MorphologyError> {
    if descriptions.is_empty() {
        return Err(MorphologyError::Empty);
    }
    let count = descriptions.len();
    let mut by_id: BTreeMap<usize, Compartment> = BTreeMap::new();
    for c in descriptions {
        c.validate()?;
        let id = c.id;
        if by_id.insert(id, c).is_some() {
            return Err(MorphologyError::DuplicateId { id });
        }
    }
    if let Some((&id, _)) = by_id.iter().find(|(&id, _)| id >= count) {
        return Err(MorphologyError::NonContiguousIds { id, count });
    }
    let compartments: Vec<Compartment> = by_id.into_values().collect();

    for c in &compartments {
        if let Some(p) = c.parent {
            if p == c.id {
                return Err(MorphologyError::CycleDetected { id: c.id });
            }
            if p >= count {
                return Err(MorphologyError::DanglingParent {
                    id: c.id,
                    parent: p,
                });
            }
        }
    }

    // Walk every parent chain; a chain longer than the compartment count loops.
    for c in &compartments {
        let mut node = c.id;
        let mut steps = 0;
        while let Some(p) = compartments[node].parent {
            node = p;
            steps += 1;
            if steps > count {
                return Err(MorphologyError::CycleDetected { id: c.id });
            }
        }
    }

    let mut roots = compartments.iter().filter(|c| c.parent.is_none());
    let first = roots.next().map(|c| c.id);
    if let (Some(first), Some(second)) = (first, roots.next()) {
        return Err(MorphologyError::MultipleRoots {
            first,
            second: second.id,
        });
    }

    for c in &compartments {
        if let Some(p) = c.parent {
            if p > c.id {
                return Err(MorphologyError::NotTopological { id: c.id, parent: p });
            }
        }
    }

    let mut children = vec![Vec::new(); count];
    for c in &compartments {
        if let Some(p) = c.parent {
            children[p].push(c.id);
        }
    }
    Ok(MorphologyTree {
        compartments,
        children,
    })
}

/// Axial coupling rates of one compartment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxialCoupling {
    /// `1/(R_a C_m)` toward the parent; zero at the root.
    pub c1: f64,
    /// `(child id, 1/(R'_a C_m))` for every child.
    pub c2: Vec<(usize, f64)>,
    /// Absolute compartment capacitance, farads.
    pub capacitance: f64,
}

impl AxialCoupling {
    pub fn c2_sum(&self) -> f64 {
        self.c2.iter().fold(0.0, |acc, &(_, c)| acc + c)
    }

    /// `c1 + sum(c2)`: the coupling share of the frozen-neighbor decay rate.
    pub fn total(&self) -> f64 {
        self.c1 + self.c2_sum()
    }
}

pub fn axial_couplings(tree: &MorphologyTree) -> Vec<AxialCoupling> {
    tree.compartments()
        .iter()
        .map(|c| {
            let denom = 2.0 * c.r_l * c.c_m * c.length * c.length;
            let c1 = if c.parent.is_some() {
                (c.radius * c.radius / c.radius) / denom
            } else {
                0.0
            };
            let c2 = tree
                .children(c.id)
                .iter()
                .map(|&q| {
                    let a_q = tree.compartment(q).radius;
                    (q, (a_q * a_q / c.radius) / denom)
                })
                .collect();
            AxialCoupling {
                c1,
                c2,
                capacitance: c.capacitance(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct MorphologyDefaults {
    c_m: f64,
    r_m: f64,
    r_l: f64,
    e_l: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct CompartmentRecord {
    id: usize,
    parent: Option<usize>,
    radius_m: f64,
    length_m: f64,
    c_m: Option<f64>,
    r_m: Option<f64>,
    r_l: Option<f64>,
    e_l: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct MorphologyFile {
    defaults: MorphologyDefaults,
    #[serde(rename = "compartment")]
    compartments: Vec<CompartmentRecord>,
}

/// Parse a morphology config (TOML). See `book/src/config.md` for the fields.
pub fn parse_morphology(text: &str) -> Result<MorphologyTree, MorphologyError> {
    let file: MorphologyFile =
        toml::from_str(text).map_err(|e| MorphologyError::Config(e.to_string()))?;
    let d = &file.defaults;
    let descriptions = file
        .compartments
        .iter()
        .map(|r| Compartment {
            id: r.id,
            parent: r.parent,
            radius: r.radius_m,
            length: r.length_m,
            c_m: r.c_m.unwrap_or(d.c_m),
            r_m: r.r_m.unwrap_or(d.r_m),
            r_l: r.r_l.unwrap_or(d.r_l),
            e_leak: r.e_l.unwrap_or(d.e_l),
        })
        .collect();
    build_tree(descriptions)
}

pub fn load_morphology(path: &Path) -> Result<MorphologyTree, MorphologyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MorphologyError::Config(format!("{}: {e}", path.display())))?;
    parse_morphology(&text)
}

/// Uniform unbranched chain of `n` identical compartments, root at id 0.
pub fn uniform_chain(n: usize, template: &Compartment) -> Result<MorphologyTree, MorphologyError> {
    let descriptions = (0..n)
        .map(|i| Compartment {
            id: i,
            parent: i.checked_sub(1),
            ..template.clone()
        })
        .collect();
    build_tree(descriptions)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cyl(id: usize, parent: Option<usize>) -> Compartment {
        Compartment {
            id,
            parent,
            radius: 1e-6,
            length: 50e-6,
            c_m: 0.01,
            r_m: 1.0,
            r_l: 1.0,
            e_leak: -0.065,
        }
    }

    #[test]
    fn single_compartment_is_a_degenerate_tree() {
        let t = build_tree(vec![cyl(0, None)]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.edge_count(), 0);
        assert!(t.children(0).is_empty());
    }

    #[test]
    fn chain_of_three() {
        let t = build_tree(vec![cyl(0, None), cyl(1, Some(0)), cyl(2, Some(1))]).unwrap();
        assert_eq!(t.children(0), &[1]);
        assert_eq!(t.children(1), &[2]);
        assert_eq!(t.edge_count(), 2);
    }

    #[test]
    fn self_parent_is_a_cycle() {
        let err = build_tree(vec![cyl(0, None), cyl(1, Some(1))]).unwrap_err();
        assert_eq!(err, MorphologyError::CycleDetected { id: 1 });
    }

    #[test]
    fn two_node_cycle() {
        let err = build_tree(vec![cyl(0, Some(1)), cyl(1, Some(0))]).unwrap_err();
        assert!(matches!(err, MorphologyError::CycleDetected { .. }));
    }

    #[test]
    fn structural_errors_name_the_compartment() {
        assert_eq!(
            build_tree(vec![cyl(0, None), cyl(1, None)]).unwrap_err(),
            MorphologyError::MultipleRoots { first: 0, second: 1 }
        );
        assert_eq!(
            build_tree(vec![cyl(0, None), cyl(1, Some(7))]).unwrap_err(),
            MorphologyError::DanglingParent { id: 1, parent: 7 }
        );
        assert_eq!(build_tree(vec![]).unwrap_err(), MorphologyError::Empty);
        assert_eq!(
            build_tree(vec![cyl(0, Some(1)), cyl(1, None)]).unwrap_err(),
            MorphologyError::NotTopological { id: 0, parent: 1 }
        );
        let mut bad = cyl(0, None);
        bad.radius = 0.0;
        assert!(matches!(
            build_tree(vec![bad]).unwrap_err(),
            MorphologyError::InvalidParameter { field: "radius", .. }
        ));
    }

    #[test]
    fn equal_radii_give_symmetric_couplings() {
        let t = build_tree(vec![cyl(0, None), cyl(1, Some(0))]).unwrap();
        let c = axial_couplings(&t);
        assert_eq!(c[0].c1, 0.0);
        assert_eq!(c[1].c1, c[0].c2[0].1);
    }

    #[test]
    fn coupling_matches_hand_arithmetic() {
        let t = build_tree(vec![cyl(0, None), cyl(1, Some(0))]).unwrap();
        let c = axial_couplings(&t);
        // 1e-6 / (2 * 1 * 0.01 * 2.5e-9) = 20_000 s^-1
        assert!((c[1].c1 - 20_000.0).abs() < 1e-9);
    }

    #[test]
    fn child_coupling_uses_child_radius() {
        let mut child = cyl(1, Some(0));
        child.radius = 2e-6;
        let t = build_tree(vec![cyl(0, None), child]).unwrap();
        let c = axial_couplings(&t);
        // (a'^2 / a) = 4e-12 / 1e-6 = 4e-6 over 5e-11
        assert!((c[0].c2[0].1 - 80_000.0).abs() < 1e-6);
        // the child's own c1 uses its own radius: 2e-6 / 5e-11
        assert!((c[1].c1 - 40_000.0).abs() < 1e-6);
    }

    #[test]
    fn doubling_length_quarters_every_coupling() {
        let base = vec![cyl(0, None), cyl(1, Some(0)), cyl(2, Some(0))];
        let long: Vec<_> = base
            .iter()
            .cloned()
            .map(|mut c| {
                c.length *= 2.0;
                c
            })
            .collect();
        let a = axial_couplings(&build_tree(base).unwrap());
        let b = axial_couplings(&build_tree(long).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.c1 / 4.0 - y.c1).abs() <= 1e-12 * x.c1.max(1.0));
            for (p, q) in x.c2.iter().zip(&y.c2) {
                assert!((p.1 / 4.0 - q.1).abs() <= 1e-12 * p.1);
            }
        }
    }

    #[test]
    fn tip_to_tip_path_runs_through_the_root() {
        // 0 -> 1 -> 2 -> 3 (axon), 0 -> 4 -> 5 (dendrite), 0 -> 6
        let t = build_tree(vec![
            cyl(0, None),
            cyl(1, Some(0)),
            cyl(2, Some(1)),
            cyl(3, Some(2)),
            cyl(4, Some(0)),
            cyl(5, Some(4)),
            cyl(6, Some(0)),
        ])
        .unwrap();
        assert_eq!(t.tip_to_tip_path(), vec![3, 2, 1, 0, 4, 5]);
    }

    #[test]
    fn parses_config_with_overrides() {
        let text = r#"
            [defaults]
            c_m = 0.01
            r_m = 1.0
            r_l = 1.0
            e_l = -0.065

            [[compartment]]
            id = 0
            radius_m = 1e-6
            length_m = 5e-5

            [[compartment]]
            id = 1
            parent = 0
            radius_m = 1e-6
            length_m = 5e-5
            r_l = 2.0
        "#;
        let t = parse_morphology(text).unwrap();
        assert_eq!(t.compartment(1).r_l, 2.0);
        assert_eq!(t.compartment(0).r_l, 1.0);
        assert!(parse_morphology("[defaults]\nc_m = 1").is_err());
    }
}
