use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeId, RelId, Triple};

/// A node-induced slice of the training graph in local ids: the message
/// edges the encoder propagates over and the decoder-facing training edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphView {
    nodes: Vec<NodeId>,
    local: Vec<Option<usize>>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub rel: Vec<RelId>,
    /// Base training edges and their inverses, in local ids.
    pub targets: Vec<Triple>,
}

impl GraphView {
    fn build(graph: &KnowledgeGraph, nodes: Vec<NodeId>, message: &[Triple], targets: &[Triple]) -> Self {
        let mut local = vec![None; graph.num_nodes()];
        for (i, &g) in nodes.iter().enumerate() {
            local[g] = Some(i);
        }
        let l = |g: NodeId| local[g].expect("edge endpoint inside view");
        let (mut src, mut dst, mut rel) = (Vec::new(), Vec::new(), Vec::new());
        for t in message {
            src.push(l(t.head));
            dst.push(l(t.tail));
            rel.push(t.rel);
        }
        let targets = targets.iter().map(|t| Triple::new(l(t.head), t.rel, l(t.tail))).collect();
        GraphView {
            nodes,
            local,
            src,
            dst,
            rel,
            targets,
        }
    }

    /// Global node ids in local order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    pub fn local_id(&self, global: NodeId) -> Result<usize> {
        self.local
            .get(global)
            .copied()
            .flatten()
            .ok_or_else(|| Error::invalid(format!("node {global} has no id in this view")))
    }
}

/// Every node and every training message edge.
pub fn full_view(graph: &KnowledgeGraph, with_sim: bool) -> GraphView {
    GraphView::build(
        graph,
        (0..graph.num_nodes()).collect(),
        &graph.message_edges(with_sim),
        &graph.train_directed(),
    )
}

/// Uniformly samples `budget` base training edges and adds their inverses.
/// The view holds only the sample endpoints, plus (optionally) every
/// known `sim` pair between two sampled nodes. A budget covering all
/// edges yields the full view.
pub fn sample_subgraph<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    budget: usize,
    with_sim: bool,
    rng: &mut R,
) -> Result<GraphView> {
    if budget == 0 {
        return Err(Error::invalid("subgraph edge budget must be at least 1"));
    }
    let base = graph.split(crate::kg::Split::Train);
    if budget >= base.len() {
        return Ok(full_view(graph, with_sim));
    }
    let mut picked = sample(rng, base.len(), budget).into_vec();
    picked.sort_unstable();
    let edges: Vec<Triple> = picked.iter().map(|&i| base[i]).collect();

    let mut in_view = vec![false; graph.num_nodes()];
    for t in &edges {
        in_view[t.head] = true;
        in_view[t.tail] = true;
    }
    let nodes: Vec<NodeId> = (0..graph.num_nodes()).filter(|&n| in_view[n]).collect();

    let mut targets = edges.clone();
    targets.extend(edges.iter().map(|t| graph.inverse_of(t)));
    let mut message = targets.clone();
    if with_sim {
        let sim = graph.relations().sim();
        for &(a, b) in graph.sim_pairs() {
            if in_view[a] && in_view[b] {
                message.push(Triple::new(a, sim, b));
                message.push(Triple::new(b, sim, a));
            }
        }
    }
    Ok(GraphView::build(graph, nodes, &message, &targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RawTuple;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> KnowledgeGraph {
        let raw: Vec<RawTuple> = (0..n - 1)
            .map(|i| RawTuple {
                rel: "next".into(),
                head: format!("n{i}"),
                tail: format!("n{}", i + 1),
            })
            .collect();
        KnowledgeGraph::from_raw(&raw, &[], &[]).unwrap()
    }

    #[test]
    fn budget_covering_graph_is_full_view() {
        let g = chain(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = sample_subgraph(&g, 5, false, &mut rng).unwrap();
        assert_eq!(v, full_view(&g, false));
    }

    #[test]
    fn budget_one_gives_single_edge_pair() {
        let g = chain(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = sample_subgraph(&g, 1, false, &mut rng).unwrap();
        assert_eq!(v.edge_count(), 2);
        assert!(v.len() <= 2);
        assert_eq!(v.targets.len(), 2);
    }

    #[test]
    fn zero_budget_rejected() {
        let g = chain(3);
        assert!(sample_subgraph(&g, 0, false, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn missing_node_has_no_local_id() {
        let g = chain(6);
        let v = sample_subgraph(&g, 1, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let absent = (0..6).find(|n| !v.nodes().contains(n)).unwrap();
        assert!(v.local_id(absent).is_err());
    }
}
