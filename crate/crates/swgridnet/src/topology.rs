//! Grid topology: unit coordinates, edge structure, channel widths, and
//! processing-path combinatorics.
//!
//! A block arranges `side^dims` processing units on a `dims`-dimensional
//! lattice with `side` positions per axis. Unit `q` feeds unit `p` exactly
//! when `q = p - e_m` for some axis `m` (one step back along a single
//! axis), so signals flow monotonically from the all-zeros corner toward
//! the all-`side-1` corner and the connection graph is acyclic.
//!
//! A *processing path* is a walk through that DAG: it may start at any
//! unit, end at any unit, and must follow edges. Its depth is the number
//! of units visited, so depths range from 1 (enter and leave at the same
//! unit) to `dims * (side - 1) + 1` (the full diagonal). The edge count of
//! the deepest path — its number of hops — is `dims * (side - 1)`.
//!
//! Channel widths grow affinely with a unit's distance from the origin
//! corner: with `r = p_0 + ... + p_{dims-1}`,
//!
//! ```text
//! in_channels(p)  = floor(c_min + (c_max - c_min) *  r      / (1 + dims*(side-1)))
//! out_channels(p) = floor(c_min + (c_max - c_min) * (1 + r) / (1 + dims*(side-1)))
//! ```
//!
//! Every edge `q -> p` satisfies `out_channels(q) == in_channels(p)`: both
//! sides floor the same integer expression because `rank(q) + 1 == rank(p)`.

use std::fmt;

use crate::error::{Error, Result};

/// Maximum number of units a spec may describe before enumeration-style
/// operations refuse to run.
pub const MAX_UNITS: usize = 1_000_000;

/// Shape of one grid block: lattice geometry plus the channel ramp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    dims: usize,
    side: usize,
    c_min: usize,
    c_max: usize,
}

impl GridSpec {
    /// Validates and builds a spec. `dims` and `side` must be at least 1,
    /// and the channel ramp needs `1 <= c_min <= c_max`.
    pub fn new(dims: usize, side: usize, c_min: usize, c_max: usize) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Config("grid dimensionality must be at least 1".into()));
        }
        if side == 0 {
            return Err(Error::Config("grid side length must be at least 1".into()));
        }
        if c_min == 0 {
            return Err(Error::Config("minimum channel width must be at least 1".into()));
        }
        if c_max < c_min {
            return Err(Error::Config(format!(
                "channel range is inverted: min {c_min} > max {c_max}"
            )));
        }
        let dims_u32 = u32::try_from(dims)
            .map_err(|_| Error::Resource(format!("grid dimensionality {dims} is out of range")))?;
        side.checked_pow(dims_u32).ok_or_else(|| {
            Error::Resource(format!("{side}^{dims} units overflow the unit counter"))
        })?;
        Ok(GridSpec { dims, side, c_min, c_max })
    }

    /// Number of lattice axes.
    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Positions per axis.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Channel width at the origin corner.
    pub fn c_min(&self) -> usize {
        self.c_min
    }

    /// Channel width approached at the far corner.
    pub fn c_max(&self) -> usize {
        self.c_max
    }

    /// Total number of processing units, `side^dims`.
    pub fn unit_count(&self) -> usize {
        self.side.pow(self.dims as u32)
    }

    /// Edge count of the longest processing path: `dims * (side - 1)` hops.
    pub fn max_path_hops(&self) -> usize {
        self.dims * (self.side - 1)
    }

    /// Unit count of the longest processing path (one more than its hops).
    pub fn max_path_units(&self) -> usize {
        self.max_path_hops() + 1
    }

    fn ramp(&self, numerator: usize) -> usize {
        let denom = 1 + self.max_path_hops();
        self.c_min + (self.c_max - self.c_min) * numerator / denom
    }

    fn guard_enumeration(&self) -> Result<()> {
        if self.unit_count() > MAX_UNITS {
            return Err(Error::Resource(format!(
                "grid has {} units, enumeration is limited to {MAX_UNITS}",
                self.unit_count()
            )));
        }
        Ok(())
    }
}

/// Position of one processing unit on the lattice; each component lies in
/// `0..side`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitCoord(Vec<usize>);

impl UnitCoord {
    /// Validates the coordinate against a spec.
    pub fn new(spec: &GridSpec, components: &[usize]) -> Result<Self> {
        if components.len() != spec.dims() {
            return Err(Error::InvalidInput(format!(
                "coordinate has {} components, grid has {} axes",
                components.len(),
                spec.dims()
            )));
        }
        if let Some(&bad) = components.iter().find(|&&c| c >= spec.side()) {
            return Err(Error::InvalidInput(format!(
                "coordinate component {bad} out of range 0..{}",
                spec.side()
            )));
        }
        Ok(UnitCoord(components.to_vec()))
    }

    /// The coordinate components.
    pub fn components(&self) -> &[usize] {
        &self.0
    }

    /// Sum of components: the unit's lattice distance from the origin corner.
    pub fn rank(&self) -> usize {
        self.0.iter().sum()
    }
}

impl fmt::Display for UnitCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "-")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// All unit coordinates in lexicographic order (last axis fastest).
pub fn unit_coords(spec: &GridSpec) -> Result<Vec<UnitCoord>> {
    spec.guard_enumeration()?;
    let mut out = Vec::with_capacity(spec.unit_count());
    let mut current = vec![0usize; spec.dims()];
    loop {
        out.push(UnitCoord(current.clone()));
        // Odometer increment on the last axis.
        let mut axis = spec.dims();
        loop {
            if axis == 0 {
                return Ok(out);
            }
            axis -= 1;
            current[axis] += 1;
            if current[axis] < spec.side() {
                break;
            }
            current[axis] = 0;
        }
    }
}

/// Units feeding `p`: every `p - e_m` that stays on the lattice. Ordered by
/// axis index, which fixes the aggregation order inside a unit.
pub fn neighbors_in(spec: &GridSpec, p: &UnitCoord) -> Result<Vec<UnitCoord>> {
    let _ = UnitCoord::new(spec, p.components())?;
    let mut out = Vec::new();
    for axis in 0..spec.dims() {
        if p.0[axis] > 0 {
            let mut q = p.0.clone();
            q[axis] -= 1;
            out.push(UnitCoord(q));
        }
    }
    Ok(out)
}

/// Units fed by `p`: every `p + e_m` that stays on the lattice, ordered by
/// axis index.
pub fn neighbors_out(spec: &GridSpec, p: &UnitCoord) -> Result<Vec<UnitCoord>> {
    let _ = UnitCoord::new(spec, p.components())?;
    let mut out = Vec::new();
    for axis in 0..spec.dims() {
        if p.0[axis] + 1 < spec.side() {
            let mut q = p.0.clone();
            q[axis] += 1;
            out.push(UnitCoord(q));
        }
    }
    Ok(out)
}

/// Input channel width of the unit at `p` (see the module docs for the
/// ramp formula).
pub fn channel_in(spec: &GridSpec, p: &UnitCoord) -> Result<usize> {
    let _ = UnitCoord::new(spec, p.components())?;
    Ok(spec.ramp(p.rank()))
}

/// Output channel width of the unit at `p`.
pub fn channel_out(spec: &GridSpec, p: &UnitCoord) -> Result<usize> {
    let _ = UnitCoord::new(spec, p.components())?;
    Ok(spec.ramp(p.rank() + 1))
}

/// Total width the split projection produces: the sum of `channel_in` over
/// all units.
pub fn split_width(spec: &GridSpec) -> Result<usize> {
    spec.guard_enumeration()?;
    let mut total = 0usize;
    for p in unit_coords(spec)? {
        total += spec.ramp(p.rank());
    }
    Ok(total)
}

/// Total width the join projection consumes: the sum of `channel_out` over
/// all units.
pub fn join_width(spec: &GridSpec) -> Result<usize> {
    spec.guard_enumeration()?;
    let mut total = 0usize;
    for p in unit_coords(spec)? {
        total += spec.ramp(p.rank() + 1);
    }
    Ok(total)
}

/// Unit coordinates sorted so every edge source precedes its target:
/// ascending rank, ties broken lexicographically. This is the order units
/// are evaluated in and the order parameters are serialized in.
pub fn topological_order(spec: &GridSpec) -> Result<Vec<UnitCoord>> {
    let mut coords = unit_coords(spec)?;
    coords.sort_by(|a, b| a.rank().cmp(&b.rank()).then_with(|| a.0.cmp(&b.0)));
    Ok(coords)
}

/// Number of processing paths per depth.
///
/// `counts()[d]` is the number of distinct walks through the unit DAG that
/// visit exactly `d` units; index 0 is unused and always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathHistogram {
    counts: Vec<u64>,
}

impl PathHistogram {
    /// Per-depth counts, indexed by depth (entry 0 is always zero).
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of paths of exactly `depth` units.
    pub fn count(&self, depth: usize) -> u64 {
        self.counts.get(depth).copied().unwrap_or(0)
    }

    /// Total number of processing paths across all depths.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Largest depth with a nonzero count.
    pub fn max_depth(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .rev()
            .find(|(_, &c)| c > 0)
            .map(|(d, _)| d)
            .unwrap_or(0)
    }

    /// `(depth, count)` rows in ascending depth, nonzero entries only.
    pub fn rows(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(d, &c)| (d, c))
    }
}

/// Counts processing paths by depth via dynamic programming.
///
/// Walks of `d` units are counted from walks of `d - 1` units: the number
/// of walks ending at unit `p` is the sum over `p`'s in-neighbors of the
/// walks ending there, plus (at `d = 1`) the walk that starts at `p`. Cost
/// is `O(unit_count * max_path_units * dims)`; grids above [`MAX_UNITS`]
/// are rejected, and counts that would exceed `u64` surface as a resource
/// error rather than wrapping.
pub fn enumerate_paths(spec: &GridSpec) -> Result<PathHistogram> {
    spec.guard_enumeration()?;
    let coords = unit_coords(spec)?;
    let n = coords.len();

    // Flat index of a coordinate in lexicographic order.
    let index_of = |c: &[usize]| -> usize {
        c.iter().fold(0usize, |acc, &comp| acc * spec.side() + comp)
    };
    // In-neighbor indices, precomputed once.
    let mut in_edges: Vec<Vec<usize>> = Vec::with_capacity(n);
    for p in &coords {
        let mut edges = Vec::new();
        for axis in 0..spec.dims() {
            if p.0[axis] > 0 {
                let mut q = p.0.clone();
                q[axis] -= 1;
                edges.push(index_of(&q));
            }
        }
        in_edges.push(edges);
    }

    let overflow =
        || Error::Resource("path count exceeds the 64-bit counter".to_string());
    let mut counts = vec![0u64; spec.max_path_units() + 1];
    // ending[u] = number of depth-d walks ending at unit u.
    let mut ending = vec![1u64; n];
    counts[1] = n as u64;
    for depth in 2..=spec.max_path_units() {
        let mut next = vec![0u64; n];
        let mut any = false;
        for (u, edges) in in_edges.iter().enumerate() {
            let mut total = 0u64;
            for &q in edges {
                total = total.checked_add(ending[q]).ok_or_else(overflow)?;
            }
            if total > 0 {
                any = true;
            }
            next[u] = total;
        }
        let mut depth_total = 0u64;
        for &c in &next {
            depth_total = depth_total.checked_add(c).ok_or_else(overflow)?;
        }
        counts[depth] = depth_total;
        ending = next;
        if !any {
            break;
        }
    }
    Ok(PathHistogram { counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dims: usize, side: usize) -> GridSpec {
        GridSpec::new(dims, side, 16, 32).unwrap()
    }

    #[test]
    fn spec_validation_rejects_degenerate_shapes() {
        assert!(GridSpec::new(0, 4, 16, 32).is_err());
        assert!(GridSpec::new(2, 0, 16, 32).is_err());
        assert!(GridSpec::new(2, 4, 0, 32).is_err());
        assert!(GridSpec::new(2, 4, 33, 32).is_err());
        assert!(GridSpec::new(2, 4, 16, 16).is_ok());
    }

    #[test]
    fn unit_count_and_path_extents() {
        let s = spec(2, 4);
        assert_eq!(s.unit_count(), 16);
        assert_eq!(s.max_path_hops(), 6);
        assert_eq!(s.max_path_units(), 7);
        let s = spec(4, 2);
        assert_eq!(s.unit_count(), 16);
        assert_eq!(s.max_path_hops(), 4);
        assert_eq!(s.max_path_units(), 5);
    }

    #[test]
    fn coordinates_enumerate_lexicographically() {
        let s = spec(2, 3);
        let coords = unit_coords(&s).unwrap();
        assert_eq!(coords.len(), 9);
        assert_eq!(coords[0].components(), &[0, 0]);
        assert_eq!(coords[1].components(), &[0, 1]);
        assert_eq!(coords[3].components(), &[1, 0]);
        assert_eq!(coords[8].components(), &[2, 2]);
    }

    #[test]
    fn coordinate_validation() {
        let s = spec(2, 3);
        assert!(UnitCoord::new(&s, &[0, 3]).is_err());
        assert!(UnitCoord::new(&s, &[0]).is_err());
        let c = UnitCoord::new(&s, &[1, 2]).unwrap();
        assert_eq!(c.rank(), 3);
        assert_eq!(c.to_string(), "1-2");
    }

    #[test]
    fn neighbor_structure_on_a_3x3_grid() {
        let s = spec(2, 3);
        let corner = UnitCoord::new(&s, &[0, 0]).unwrap();
        assert!(neighbors_in(&s, &corner).unwrap().is_empty());
        assert_eq!(
            neighbors_out(&s, &corner).unwrap(),
            vec![UnitCoord::new(&s, &[1, 0]).unwrap(), UnitCoord::new(&s, &[0, 1]).unwrap()]
        );
        let mid = UnitCoord::new(&s, &[1, 1]).unwrap();
        assert_eq!(
            neighbors_in(&s, &mid).unwrap(),
            vec![UnitCoord::new(&s, &[0, 1]).unwrap(), UnitCoord::new(&s, &[1, 0]).unwrap()]
        );
        let far = UnitCoord::new(&s, &[2, 2]).unwrap();
        assert!(neighbors_out(&s, &far).unwrap().is_empty());
    }

    #[test]
    fn neighbors_are_mutual() {
        let s = spec(3, 3);
        for p in unit_coords(&s).unwrap() {
            for q in neighbors_in(&s, &p).unwrap() {
                assert!(neighbors_out(&s, &q).unwrap().contains(&p));
            }
            for q in neighbors_out(&s, &p).unwrap() {
                assert!(neighbors_in(&s, &q).unwrap().contains(&p));
            }
        }
    }

    #[test]
    fn channel_ramp_matches_worked_examples() {
        // 2 axes, side 4, widths 16..32: denominator 1 + 2*3 = 7.
        let s = spec(2, 4);
        let origin = UnitCoord::new(&s, &[0, 0]).unwrap();
        assert_eq!(channel_in(&s, &origin).unwrap(), 16);
        assert_eq!(channel_out(&s, &origin).unwrap(), 16 + 16 / 7); // 18
        assert_eq!(channel_out(&s, &origin).unwrap(), 18);
        let far = UnitCoord::new(&s, &[3, 3]).unwrap();
        assert_eq!(channel_in(&s, &far).unwrap(), 16 + 16 * 6 / 7); // 29
        assert_eq!(channel_out(&s, &far).unwrap(), 32);
    }

    #[test]
    fn edge_channel_compatibility_holds_exactly() {
        for (dims, side, c_min, c_max) in
            [(2usize, 4usize, 16usize, 32usize), (3, 3, 5, 17), (1, 16, 64, 128), (4, 2, 7, 29)]
        {
            let s = GridSpec::new(dims, side, c_min, c_max).unwrap();
            for p in unit_coords(&s).unwrap() {
                for q in neighbors_in(&s, &p).unwrap() {
                    assert_eq!(
                        channel_out(&s, &q).unwrap(),
                        channel_in(&s, &p).unwrap(),
                        "edge {q} -> {p} is incompatible in {dims}d side {side}"
                    );
                }
            }
        }
    }

    #[test]
    fn split_and_join_widths_match_worked_example() {
        let s = spec(2, 4);
        assert_eq!(split_width(&s).unwrap(), 358);
        assert_eq!(join_width(&s).unwrap(), 395);
        // Sanity: join - split = sum over units of (out - in).
        let mut diff = 0isize;
        for p in unit_coords(&s).unwrap() {
            diff += channel_out(&s, &p).unwrap() as isize - channel_in(&s, &p).unwrap() as isize;
        }
        assert_eq!(diff, 395 - 358);
    }

    #[test]
    fn constant_ramp_when_min_equals_max() {
        let s = GridSpec::new(2, 4, 24, 24).unwrap();
        for p in unit_coords(&s).unwrap() {
            assert_eq!(channel_in(&s, &p).unwrap(), 24);
            assert_eq!(channel_out(&s, &p).unwrap(), 24);
        }
        assert_eq!(split_width(&s).unwrap(), 24 * 16);
    }

    #[test]
    fn topological_order_is_rank_then_lex_and_respects_edges() {
        let s = spec(2, 3);
        let order = topological_order(&s).unwrap();
        let expect: Vec<&[usize]> = vec![
            &[0, 0],
            &[0, 1],
            &[1, 0],
            &[0, 2],
            &[1, 1],
            &[2, 0],
            &[1, 2],
            &[2, 1],
            &[2, 2],
        ];
        let got: Vec<&[usize]> = order.iter().map(|c| c.components()).collect();
        assert_eq!(got, expect);
        // Every in-neighbor appears strictly earlier.
        let pos =
            |c: &UnitCoord| order.iter().position(|o| o == c).expect("coordinate in order");
        for p in &order {
            for q in neighbors_in(&s, p).unwrap() {
                assert!(pos(&q) < pos(p));
            }
        }
    }

    /// Literal depth-first path enumeration, the independent reference for
    /// the dynamic program: from every start unit, extend walks edge by
    /// edge and tally each prefix once.
    fn histogram_by_dfs(spec: &GridSpec) -> Vec<u64> {
        fn extend(
            spec: &GridSpec,
            at: &UnitCoord,
            depth: usize,
            counts: &mut Vec<u64>,
        ) {
            if counts.len() <= depth {
                counts.resize(depth + 1, 0);
            }
            counts[depth] += 1;
            for next in neighbors_out(spec, at).unwrap() {
                extend(spec, &next, depth + 1, counts);
            }
        }
        let mut counts = vec![0u64; 2];
        for start in unit_coords(spec).unwrap() {
            extend(spec, &start, 1, &mut counts);
        }
        counts
    }

    #[test]
    fn path_histogram_matches_dfs_reference() {
        for (dims, side) in [(1usize, 5usize), (2, 3), (2, 4), (3, 2), (3, 3), (4, 2)] {
            let s = GridSpec::new(dims, side, 8, 16).unwrap();
            let hist = enumerate_paths(&s).unwrap();
            let reference = histogram_by_dfs(&s);
            for depth in 1..reference.len().max(hist.counts().len()) {
                assert_eq!(
                    hist.count(depth),
                    reference.get(depth).copied().unwrap_or(0),
                    "depth {depth} differs for {dims}d side {side}"
                );
            }
        }
    }

    #[test]
    fn path_histogram_frozen_values_2d_side_4() {
        // 16 units on a 4x4 grid: depths 1..=7 with these exact counts.
        let hist = enumerate_paths(&spec(2, 4)).unwrap();
        let expect: &[(usize, u64)] =
            &[(1, 16), (2, 24), (3, 34), (4, 44), (5, 48), (6, 40), (7, 20)];
        for &(depth, count) in expect {
            assert_eq!(hist.count(depth), count, "depth {depth}");
        }
        assert_eq!(hist.total(), 226);
        assert_eq!(hist.max_depth(), 7);
        assert_eq!(hist.count(8), 0);
    }

    #[test]
    fn path_histogram_frozen_values_1d_side_16() {
        // A 16-unit chain: L - d + 1 walks of each depth d.
        let hist = enumerate_paths(&GridSpec::new(1, 16, 8, 16).unwrap()).unwrap();
        for depth in 1..=16 {
            assert_eq!(hist.count(depth), (17 - depth) as u64, "depth {depth}");
        }
        assert_eq!(hist.total(), 136);
        assert_eq!(hist.max_depth(), 16);
    }

    #[test]
    fn path_histogram_frozen_values_4d_side_2() {
        // A 4-cube: 16 units, depths 1..=5.
        let hist = enumerate_paths(&GridSpec::new(4, 2, 8, 16).unwrap()).unwrap();
        let expect: &[(usize, u64)] = &[(1, 16), (2, 32), (3, 48), (4, 48), (5, 24)];
        for &(depth, count) in expect {
            assert_eq!(hist.count(depth), count, "depth {depth}");
        }
        assert_eq!(hist.total(), 168);
        assert_eq!(hist.max_depth(), 5);
    }

    #[test]
    fn deepest_path_visits_the_full_diagonal() {
        // The number of hops of the deepest walk equals dims * (side - 1);
        // it visits one more unit than that. Exactly the diagonal walks
        // reach that depth: multinomial (dims*(side-1))! / (side-1)!^dims.
        let hist = enumerate_paths(&spec(2, 4)).unwrap();
        assert_eq!(hist.max_depth() - 1, spec(2, 4).max_path_hops());
        assert_eq!(hist.count(hist.max_depth()), 20); // C(6, 3)
        let cube = GridSpec::new(4, 2, 8, 16).unwrap();
        let hist = enumerate_paths(&cube).unwrap();
        assert_eq!(hist.max_depth() - 1, cube.max_path_hops());
        assert_eq!(hist.count(hist.max_depth()), 24); // 4!
    }

    #[test]
    fn single_unit_grid_has_one_path() {
        let s = GridSpec::new(1, 1, 4, 4).unwrap();
        let hist = enumerate_paths(&s).unwrap();
        assert_eq!(hist.count(1), 1);
        assert_eq!(hist.total(), 1);
        assert_eq!(s.max_path_hops(), 0);
        assert_eq!(s.max_path_units(), 1);
    }

    #[test]
    fn enumeration_guard_rejects_oversized_grids() {
        // 101^3 > 1_000_000 units.
        let s = GridSpec::new(3, 101, 4, 8).unwrap();
        assert!(matches!(enumerate_paths(&s), Err(Error::Resource(_))));
        assert!(matches!(unit_coords(&s), Err(Error::Resource(_))));
        assert!(matches!(split_width(&s), Err(Error::Resource(_))));
    }
}
