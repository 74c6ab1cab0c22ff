//! Built-in networks. The embedded ones keep every edge along a lattice
//! axis or diagonal, the two directions an 8-neighbor grid represents
//! without length error, so tube solves converge cleanly under refinement.

use got_core::graph::{Edge, MetricGraph, Point3};

pub const BUILTIN_NAMES: &[&str] = &["pipe", "path2", "y", "fork", "diamond"];

fn edge(id: &str, tail: usize, head: usize, a: Point3, b: Point3) -> Edge {
    let length = got_core::graph::dist3(a, b);
    Edge { id: id.into(), tail, head, length, embed: Some(vec![a, b]) }
}

/// A single horizontal unit pipe.
fn pipe() -> MetricGraph {
    MetricGraph::new(
        vec!["a".into(), "b".into()],
        vec![edge("e0", 0, 1, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])],
    )
    .unwrap()
}

/// Two collinear unit edges sharing a middle node.
fn path2() -> MetricGraph {
    MetricGraph::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![
            edge("e0", 0, 1, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            edge("e1", 1, 2, [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]),
        ],
    )
    .unwrap()
}

/// Horizontal stem of length 1 splitting into vertical arms of length 1.
/// The right-angle junction makes the corner shortcut inside the junction
/// ball a deterministic multiple of the tube radius, so transport gaps
/// shrink linearly under refinement instead of drowning in grid noise.
fn y_network() -> MetricGraph {
    MetricGraph::new(
        vec!["root".into(), "split".into(), "tip_up".into(), "tip_down".into()],
        vec![
            edge("stem", 0, 1, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            edge("up", 1, 2, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]),
            edge("down", 1, 3, [1.0, 0.0, 0.0], [1.0, -1.0, 0.0]),
        ],
    )
    .unwrap()
}

/// Diagonal stem from the lower-left corner splitting into an upper and a
/// lower arm that both end at the right; all three edges run on lattice
/// diagonals.
fn fork() -> MetricGraph {
    MetricGraph::new(
        vec!["root".into(), "split".into(), "tip_up".into(), "tip_down".into()],
        vec![
            edge("stem", 0, 1, [0.0, 0.0, 0.0], [0.7, 0.7, 0.0]),
            edge("up", 1, 2, [0.7, 0.7, 0.0], [1.4, 1.4, 0.0]),
            edge("down", 1, 3, [0.7, 0.7, 0.0], [1.4, 0.0, 0.0]),
        ],
    )
    .unwrap()
}

/// Four nodes on a cycle plus one chord: removing any single edge keeps the
/// graph connected, which suits randomized deletion experiments. Pure
/// metric data, no embedding.
fn diamond() -> MetricGraph {
    let e = |id: &str, tail, head, length| Edge {
        id: id.into(),
        tail,
        head,
        length,
        embed: None,
    };
    MetricGraph::new(
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        vec![
            e("ab", 0, 1, 1.0),
            e("bc", 1, 2, 0.8),
            e("cd", 2, 3, 1.1),
            e("da", 3, 0, 0.9),
            e("ac", 0, 2, 0.6),
        ],
    )
    .unwrap()
}

pub fn builtin(name: &str) -> Option<MetricGraph> {
    match name {
        "pipe" => Some(pipe()),
        "path2" => Some(path2()),
        "y" => Some(y_network()),
        "fork" => Some(fork()),
        "diamond" => Some(diamond()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_construct_and_are_embedded_where_needed() {
        for name in BUILTIN_NAMES {
            let g = builtin(name).unwrap();
            assert!(g.edge_count() >= 1, "{} has no edges", name);
        }
        assert_eq!(builtin("y").unwrap().embed_dim(), Some(2));
        assert_eq!(builtin("fork").unwrap().embed_dim(), Some(2));
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn fork_arms_run_on_lattice_diagonals() {
        let g = fork();
        for e in g.edges() {
            let poly = e.embed.as_ref().unwrap();
            let dx = (poly[1][0] - poly[0][0]).abs();
            let dy = (poly[1][1] - poly[0][1]).abs();
            assert!((dx - dy).abs() < 1e-12, "edge {} is off-diagonal", e.id);
        }
    }
}
