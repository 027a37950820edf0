use std::collections::BTreeSet;

use crate::graph::{Graph, GraphObject, ObjectId};

use super::Pattern;

/// One assignment of every pattern variable, in the pattern's variable
/// order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Binding {
    entries: Vec<(String, ObjectId)>,
}

impl Binding {
    pub fn get(&self, var: &str) -> Option<&ObjectId> {
        self.entries.iter().find(|(v, _)| v == var).map(|(_, id)| id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ObjectId)> {
        self.entries.iter().map(|(v, id)| (v.as_str(), id))
    }

    pub fn ids(&self) -> Vec<&ObjectId> {
        self.entries.iter().map(|(_, id)| id).collect()
    }
}

/// All bindings with the anchor variable bound to `anchor`, ordered
/// lexicographically by the bound ids in variable order.
pub fn match_pattern(graph: &Graph, pattern: &Pattern, anchor: &ObjectId) -> Vec<Binding> {
    let Some(anchor_obj) = graph.object(anchor) else {
        return Vec::new();
    };
    let order = search_order(pattern);
    let mut slots: Vec<Option<&GraphObject>> = vec![None; pattern.nodes.len()];
    let anchor_idx = var_index(pattern, &pattern.anchor);
    let mut out = Vec::new();
    if admissible(graph, pattern, anchor_idx, anchor_obj, &slots) {
        slots[anchor_idx] = Some(anchor_obj);
        extend(graph, pattern, &order, 1, &mut slots, &mut out);
    }
    out.sort();
    out
}

fn var_index(p: &Pattern, var: &str) -> usize {
    p.nodes.iter().position(|n| n.var == var).expect("declared variable")
}

/// Anchor first, then variables reachable through edges from bound ones,
/// then the rest in declaration order.
fn search_order(p: &Pattern) -> Vec<usize> {
    let mut order = vec![var_index(p, &p.anchor)];
    while order.len() < p.nodes.len() {
        let next = p
            .edges
            .iter()
            .find_map(|e| {
                let (f, t) = (var_index(p, &e.from), var_index(p, &e.to));
                match (order.contains(&f), order.contains(&t)) {
                    (true, false) => Some(t),
                    (false, true) => Some(f),
                    _ => None,
                }
            })
            .or_else(|| (0..p.nodes.len()).find(|i| !order.contains(i)))
            .expect("unplaced variable");
        order.push(next);
    }
    order
}

fn extend<'g>(
    graph: &'g Graph,
    p: &Pattern,
    order: &[usize],
    depth: usize,
    slots: &mut Vec<Option<&'g GraphObject>>,
    out: &mut Vec<Binding>,
) {
    if depth == order.len() {
        out.push(Binding {
            entries: p
                .nodes
                .iter()
                .zip(slots.iter())
                .map(|(n, o)| (n.var.clone(), o.expect("bound").id.clone()))
                .collect(),
        });
        return;
    }
    let var = order[depth];
    for cand in candidates(graph, p, var, slots) {
        if admissible(graph, p, var, cand, slots) {
            slots[var] = Some(cand);
            extend(graph, p, order, depth + 1, slots, out);
            slots[var] = None;
        }
    }
}

fn candidates<'g>(graph: &'g Graph, p: &Pattern, var: usize, slots: &[Option<&'g GraphObject>]) -> Vec<&'g GraphObject> {
    let name = &p.nodes[var].var;
    for e in &p.edges {
        if &e.to == name {
            if let Some(src) = slots[var_index(p, &e.from)] {
                let ids: BTreeSet<&ObjectId> = graph.outgoing(&src.id).filter(|r| r.kind == e.rel).map(|r| &r.to).collect();
                return ids.into_iter().filter_map(|id| graph.object(id)).collect();
            }
        }
        if &e.from == name {
            if let Some(dst) = slots[var_index(p, &e.to)] {
                let ids: BTreeSet<&ObjectId> =
                    graph.incoming(&dst.id).filter(|r| r.kind == e.rel).map(|r| &r.from).collect();
                return ids.into_iter().filter_map(|id| graph.object(id)).collect();
            }
        }
    }
    match &p.nodes[var].kind {
        Some(kind) => graph.objects_of_type(kind).collect(),
        None => graph.objects().collect(),
    }
}

/// Checks type, predicates, and every edge whose ends are bound once `obj`
/// takes slot `var`.
fn admissible(graph: &Graph, p: &Pattern, var: usize, obj: &GraphObject, slots: &[Option<&GraphObject>]) -> bool {
    let node = &p.nodes[var];
    if node.kind.as_ref().is_some_and(|k| k != &obj.kind) {
        return false;
    }
    if !p.predicates.iter().filter(|pr| pr.var == node.var).all(|pr| pr.holds(&obj.properties)) {
        return false;
    }
    let bound = |name: &str| -> Option<&GraphObject> {
        if name == node.var {
            Some(obj)
        } else {
            slots[var_index(p, name)]
        }
    };
    p.edges.iter().filter(|e| e.from == node.var || e.to == node.var).all(|e| {
        match (bound(&e.from), bound(&e.to)) {
            (Some(f), Some(t)) => graph.has_edge(&f.id, &e.rel, &t.id),
            _ => true,
        }
    })
}
