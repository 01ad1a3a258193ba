//! Built-in script fixtures, also shipped as JSON under `fixtures/`.

use crate::script::ScriptTree;

pub const FIG3_TOY_JSON: &str = include_str!("../fixtures/fig3_toy.json");
pub const BIG_TREE_JSON: &str = include_str!("../fixtures/big_tree.json");

/// Prompt "Q"; root "a1 a2" forks into child "d1 d2" and sibling "b1".
pub fn fig3_toy() -> ScriptTree {
    ScriptTree::from_json(FIG3_TOY_JSON).expect("bundled fixture is valid")
}

/// An 8-token prompt answered by a 4-token intro and five list items, each a
/// 6-token head forking a 30-token detail. The last head's sibling is empty.
pub fn big_tree() -> ScriptTree {
    ScriptTree::from_json(BIG_TREE_JSON).expect("bundled fixture is valid")
}

pub fn by_name(name: &str) -> Option<ScriptTree> {
    match name {
        "fig3-toy" | "fig3_toy" => Some(fig3_toy()),
        "big-tree" | "big_tree" => Some(big_tree()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn big_tree_shape() {
        let t = big_tree();
        assert_eq!(t.prompt.len(), 8);
        assert_eq!(t.content_len(), 184);
        assert_eq!(t.fork_count(), 5);
        assert_eq!(t.nodes.len(), 11);
    }

    #[test]
    fn lookup() {
        assert!(by_name("fig3-toy").is_some());
        assert!(by_name("nope").is_none());
    }
}
