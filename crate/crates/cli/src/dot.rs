//! Graphviz rendering of graph records.

use edgeedit::relgraph::GraphRecord;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' | '\r' => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

/// One node per entity (surface and label when the record carries nodes),
/// one labeled arc per edge, in index order.
pub fn to_dot(record: &GraphRecord) -> String {
    let mut out = format!("digraph \"{}\" {{\n", escape(&record.doc_id));
    out.push_str("  rankdir=LR;\n  node [shape=box];\n");
    match &record.nodes {
        Some(nodes) => {
            for n in nodes {
                // `\n` inside a quoted label is a Graphviz line break.
                out.push_str(&format!(
                    "  n{} [label=\"{}\\n({})\"];\n",
                    n.index,
                    escape(&n.surface),
                    escape(&n.label)
                ));
            }
        }
        None => {
            for i in 0..record.node_count() {
                out.push_str(&format!("  n{i} [label=\"{i}\"];\n"));
            }
        }
    }
    for e in &record.edges {
        out.push_str(&format!("  n{} -> n{} [label=\"{}\"];\n", e.head, e.tail, e.label.name()));
    }
    out.push_str("}\n");
    out
}
