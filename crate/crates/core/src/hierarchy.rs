//! Label taxonomy: a forest of rooted trees loaded from a tab-separated edge
//! list.
//!
//! Labels are numbered in breadth-first order (roots first, then each level
//! in parent order, siblings in file order). Because of that numbering two
//! hierarchies with the same shape compare equal regardless of how their
//! edge lists were interleaved.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Virtual parent used in edge lists to mark top-level labels.
pub const VIRTUAL_ROOT: &str = "ROOT";

/// Names that can never be label names: the sequence symbols plus the
/// vocabulary's own reserved tokens.
pub const RESERVED_NAMES: [&str; 7] = ["_", "/", "EOS", "PAD", "BOS", "UNK", VIRTUAL_ROOT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelId(pub usize);

impl LabelId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A set of labels of one hierarchy. Consistency is checked, not enforced.
pub type LabelSet = BTreeSet<LabelId>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    names: Vec<String>,
    index: HashMap<String, LabelId>,
    parent: Vec<Option<LabelId>>,
    children: Vec<Vec<LabelId>>,
    roots: Vec<LabelId>,
    depth: Vec<usize>,
}

pub fn is_valid_label_name(name: &str) -> bool {
    !name.is_empty()
        && !RESERVED_NAMES.contains(&name)
        && !name.chars().any(char::is_whitespace)
}

impl LabelHierarchy {
    /// Parses `parent<TAB>child` lines. Blank lines and lines starting with
    /// `#` are skipped.
    pub fn parse(source: &str) -> Result<Self> {
        // Provisional numbering in order of first appearance.
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut parent: Vec<Option<usize>> = Vec::new();
        let mut parent_line: Vec<usize> = Vec::new();
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut root_order: Vec<usize> = Vec::new();

        let mut intern = |name: &str,
                          names: &mut Vec<String>,
                          parent: &mut Vec<Option<usize>>,
                          parent_line: &mut Vec<usize>,
                          children: &mut Vec<Vec<usize>>| {
            if let Some(&id) = index.get(name) {
                return id;
            }
            let id = names.len();
            names.push(name.to_string());
            index.insert(name.to_string(), id);
            parent.push(None);
            parent_line.push(0);
            children.push(Vec::new());
            id
        };

        for (lineno, raw) in source.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
            if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::MalformedEdge {
                    line,
                    content: raw.to_string(),
                });
            }
            let (p, c) = (fields[0], fields[1]);
            if !is_valid_label_name(c) {
                return Err(Error::ReservedName {
                    line,
                    label: c.to_string(),
                });
            }
            if p != VIRTUAL_ROOT && !is_valid_label_name(p) {
                return Err(Error::ReservedName {
                    line,
                    label: p.to_string(),
                });
            }

            let parent_id = if p == VIRTUAL_ROOT {
                None
            } else {
                Some(intern(p, &mut names, &mut parent, &mut parent_line, &mut children))
            };
            let child_id = intern(c, &mut names, &mut parent, &mut parent_line, &mut children);

            if parent_line[child_id] != 0 {
                if parent[child_id] == parent_id {
                    // Repeated identical edge.
                    continue;
                }
                let existing = parent[child_id].map_or(VIRTUAL_ROOT, |e| names[e].as_str());
                return Err(Error::ConflictingParent {
                    line,
                    child: c.to_string(),
                    existing: existing.to_string(),
                    parent: p.to_string(),
                });
            }
            parent_line[child_id] = line;
            parent[child_id] = parent_id;
            match parent_id {
                Some(pid) => children[pid].push(child_id),
                None => root_order.push(child_id),
            }
        }

        if names.is_empty() {
            return Err(Error::EmptyHierarchy);
        }

        // Cycle detection: walk up from every node; a walk that revisits a
        // node never reaches a root.
        let mut state = vec![0u8; names.len()]; // 0 unvisited, 1 on stack, 2 done
        for start in 0..names.len() {
            let mut path = Vec::new();
            let mut cur = Some(start);
            while let Some(node) = cur {
                match state[node] {
                    2 => break,
                    1 => {
                        let pos = path.iter().position(|&n| n == node).unwrap_or(0);
                        let cycle = &path[pos..];
                        let closing = cycle
                            .iter()
                            .copied()
                            .max_by_key(|&n| parent_line[n])
                            .unwrap_or(node);
                        return Err(Error::Cycle {
                            line: parent_line[closing],
                            label: names[closing].clone(),
                        });
                    }
                    _ => {
                        state[node] = 1;
                        path.push(node);
                        cur = parent[node];
                    }
                }
            }
            for n in path {
                state[n] = 2;
            }
        }

        // Labels that only ever appear as parents are implicit roots, placed
        // by first appearance relative to explicit `ROOT` children.
        let mut roots: Vec<usize> = Vec::new();
        let mut explicit = root_order.iter().peekable();
        for id in 0..names.len() {
            if parent[id].is_some() {
                continue;
            }
            if parent_line[id] == 0 {
                while let Some(&&r) = explicit.peek() {
                    if r < id {
                        roots.push(r);
                        explicit.next();
                    } else {
                        break;
                    }
                }
                roots.push(id);
            }
        }
        roots.extend(explicit.copied());

        // Renumber breadth-first.
        let mut order = Vec::with_capacity(names.len());
        let mut queue: VecDeque<usize> = roots.iter().copied().collect();
        while let Some(n) = queue.pop_front() {
            order.push(n);
            queue.extend(children[n].iter().copied());
        }
        debug_assert_eq!(order.len(), names.len());
        let mut new_id = vec![0usize; names.len()];
        for (new, &old) in order.iter().enumerate() {
            new_id[old] = new;
        }

        let mut h = LabelHierarchy {
            names: order.iter().map(|&o| names[o].clone()).collect(),
            index: HashMap::new(),
            parent: order
                .iter()
                .map(|&o| parent[o].map(|p| LabelId(new_id[p])))
                .collect(),
            children: order
                .iter()
                .map(|&o| children[o].iter().map(|&c| LabelId(new_id[c])).collect())
                .collect(),
            roots: roots.iter().map(|&r| LabelId(new_id[r])).collect(),
            depth: vec![0; names.len()],
        };
        h.index = h
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), LabelId(i)))
            .collect();
        for i in 0..h.names.len() {
            // Parents precede children in BFS numbering.
            h.depth[i] = match h.parent[i] {
                Some(p) => h.depth[p.0] + 1,
                None => 1,
            };
        }
        Ok(h)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders the hierarchy back into edge-list form, roots attached to
    /// `ROOT`. Parsing the output yields an equal hierarchy.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for id in self.ids() {
            let parent = self.parent[id.0].map_or(VIRTUAL_ROOT, |p| self.name(p));
            out.push_str(parent);
            out.push('\t');
            out.push_str(self.name(id));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.names.len()).map(LabelId)
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<LabelId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn parent(&self, id: LabelId) -> Option<LabelId> {
        self.parent[id.0]
    }

    pub fn children(&self, id: LabelId) -> &[LabelId] {
        &self.children[id.0]
    }

    pub fn roots(&self) -> &[LabelId] {
        &self.roots
    }

    /// 1-based level; roots are at depth 1.
    pub fn depth(&self, id: LabelId) -> usize {
        self.depth[id.0]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn is_leaf(&self, id: LabelId) -> bool {
        self.children[id.0].is_empty()
    }

    pub fn labels_at_depth(&self, depth: usize) -> impl Iterator<Item = LabelId> + '_ {
        self.ids().filter(move |&l| self.depth(l) == depth)
    }

    /// Proper ancestors ordered from the root downward.
    pub fn ancestors(&self, id: LabelId) -> Vec<LabelId> {
        let mut out = Vec::with_capacity(self.depth(id).saturating_sub(1));
        let mut cur = self.parent[id.0];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p.0];
        }
        out.reverse();
        out
    }

    pub fn ancestors_of(&self, name: &str) -> Result<Vec<LabelId>> {
        Ok(self.ancestors(self.require(name)?))
    }

    pub fn label_set<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<LabelSet> {
        names.into_iter().map(|n| self.require(n)).collect()
    }

    pub fn names_of(&self, set: &LabelSet) -> Vec<&str> {
        set.iter().map(|&l| self.name(l)).collect()
    }

    /// First member whose parent is absent from the set, if any.
    pub fn first_orphan(&self, set: &LabelSet) -> Option<(LabelId, LabelId)> {
        set.iter().find_map(|&l| match self.parent(l) {
            Some(p) if !set.contains(&p) => Some((l, p)),
            _ => None,
        })
    }

    /// True iff every member's ancestors are also members. Checking parents
    /// suffices since the condition is transitive.
    pub fn is_consistent(&self, set: &LabelSet) -> bool {
        self.first_orphan(set).is_none()
    }

    pub fn check_consistent(&self, set: &LabelSet) -> Result<()> {
        match self.first_orphan(set) {
            None => Ok(()),
            Some((label, missing)) => Err(Error::Inconsistent {
                label: self.name(label).to_string(),
                missing: self.name(missing).to_string(),
            }),
        }
    }

    /// Adds every member's ancestors.
    pub fn closure(&self, set: &LabelSet) -> LabelSet {
        let mut out = set.clone();
        for &l in set {
            out.extend(self.ancestors(l));
        }
        out
    }

    /// Restriction of the hierarchy to a consistent label set. Depths and
    /// sibling order carry over.
    pub fn induced_subtree(&self, set: &LabelSet) -> Result<LabelHierarchy> {
        if let Some(bad) = set.iter().find(|l| l.0 >= self.len()) {
            return Err(Error::UnknownLabel(bad.to_string()));
        }
        self.check_consistent(set)?;
        let mut edges = String::new();
        for &l in set {
            let parent = self.parent(l).map_or(VIRTUAL_ROOT, |p| self.name(p));
            edges.push_str(parent);
            edges.push('\t');
            edges.push_str(self.name(l));
            edges.push('\n');
        }
        LabelHierarchy::parse(&edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> LabelHierarchy {
        LabelHierarchy::parse("ROOT\tl1\nROOT\tl3\nl1\tl2\nl3\tl4\nl2\tl5\n").unwrap()
    }

    #[test]
    fn two_node_chain() {
        let h = LabelHierarchy::parse("ROOT\tA\nA\tB\n").unwrap();
        assert_eq!(h.depth(h.id("A").unwrap()), 1);
        assert_eq!(h.depth(h.id("B").unwrap()), 2);
        assert_eq!(h.roots(), &[h.id("A").unwrap()]);
    }

    #[test]
    fn worked_example_depths() {
        let h = worked_example();
        let depths: Vec<usize> = ["l1", "l3", "l2", "l4", "l5"]
            .iter()
            .map(|n| h.depth(h.id(n).unwrap()))
            .collect();
        assert_eq!(depths, vec![1, 1, 2, 2, 3]);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = LabelHierarchy::parse("B\tA\nA\tB\n").unwrap_err();
        assert!(matches!(err, Error::Cycle { line: 2, .. }), "{err}");
    }

    #[test]
    fn self_loop_is_a_cycle() {
        assert!(matches!(
            LabelHierarchy::parse("ROOT\tA\nA\tA\n"),
            Err(Error::ConflictingParent { .. }) | Err(Error::Cycle { .. })
        ));
        assert!(matches!(
            LabelHierarchy::parse("X\tY\nY\tZ\nZ\tX\n"),
            Err(Error::Cycle { line: 3, .. })
        ));
    }

    #[test]
    fn conflicting_parent_reports_line() {
        let err = LabelHierarchy::parse("ROOT\tA\nROOT\tB\nA\tC\n\nB\tC\n").unwrap_err();
        match err {
            Error::ConflictingParent { line, child, .. } => {
                assert_eq!(line, 5);
                assert_eq!(child, "C");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn reserved_names_are_rejected() {
        for bad in ["_", "/", "EOS", "ROOT"] {
            let err = LabelHierarchy::parse(&format!("ROOT\tA\nA\t{bad}\n")).unwrap_err();
            assert!(matches!(err, Error::ReservedName { line: 2, .. }), "{bad}: {err}");
        }
        assert!(matches!(
            LabelHierarchy::parse("ROOT\tA\n_\tB\n"),
            Err(Error::ReservedName { line: 2, .. })
        ));
    }

    #[test]
    fn comments_and_malformed_lines() {
        let h = LabelHierarchy::parse("# taxonomy\n\nROOT\tA\n  \n").unwrap();
        assert_eq!(h.len(), 1);
        assert!(matches!(
            LabelHierarchy::parse("ROOT\tA\nA B\n"),
            Err(Error::MalformedEdge { line: 2, .. })
        ));
        assert!(matches!(LabelHierarchy::parse("# nothing\n"), Err(Error::EmptyHierarchy)));
    }

    #[test]
    fn implicit_roots_and_sibling_order() {
        let h = LabelHierarchy::parse("A\tA2\nROOT\tB\nA\tA1\nB\tB1\n").unwrap();
        let root_names: Vec<&str> = h.roots().iter().map(|&r| h.name(r)).collect();
        assert_eq!(root_names, vec!["A", "B"]);
        let a = h.id("A").unwrap();
        let kids: Vec<&str> = h.children(a).iter().map(|&c| h.name(c)).collect();
        assert_eq!(kids, vec!["A2", "A1"]);
    }

    #[test]
    fn ancestors_readout() {
        let h = LabelHierarchy::parse("ROOT\tA\nA\tB\nB\tC\n").unwrap();
        assert!(h.ancestors_of("A").unwrap().is_empty());
        let anc: Vec<&str> = h
            .ancestors_of("C")
            .unwrap()
            .into_iter()
            .map(|l| h.name(l))
            .collect();
        assert_eq!(anc, vec!["A", "B"]);
        assert!(matches!(h.ancestors_of("Q"), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn consistency() {
        let h = LabelHierarchy::parse("ROOT\tA\nA\tB\n").unwrap();
        assert!(h.is_consistent(&h.label_set(["A", "B"]).unwrap()));
        assert!(!h.is_consistent(&h.label_set(["B"]).unwrap()));
        assert!(h.is_consistent(&LabelSet::new()));
    }

    #[test]
    fn induced_subtrees() {
        let h = worked_example();
        let all: LabelSet = h.ids().collect();
        assert_eq!(h.induced_subtree(&all).unwrap(), h);

        let one = h.induced_subtree(&h.label_set(["l3"]).unwrap()).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.depth(one.id("l3").unwrap()), 1);

        let big = LabelHierarchy::parse(
            "ROOT\tl1\nROOT\tl3\nROOT\tx\nl1\tl2\nl1\ty\nl3\tl4\nl2\tl5\nl5\tz\n",
        )
        .unwrap();
        let s = big.label_set(["l1", "l2", "l3", "l4", "l5"]).unwrap();
        assert_eq!(big.induced_subtree(&s).unwrap(), worked_example());

        let bad = big.label_set(["l5"]).unwrap();
        assert!(matches!(big.induced_subtree(&bad), Err(Error::Inconsistent { .. })));
    }

    #[test]
    fn edge_list_round_trip() {
        let h = LabelHierarchy::parse("A\tA2\nROOT\tB\nA\tA1\nB\tB1\nA1\tz\n").unwrap();
        assert_eq!(LabelHierarchy::parse(&h.to_edge_list()).unwrap(), h);
    }
}
