//! Rotary embedding invariants over random vectors and positions.

use mlaforge::numerics::norm2;
use mlaforge::rope::{apply_rope, relative_score, Position, Retained, RopeKind, RopeSpec};
use proptest::prelude::*;

fn spec(kind: RopeKind, d_head: usize) -> RopeSpec {
    RopeSpec::new(kind, 10000.0, d_head).unwrap()
}

fn kind_strategy() -> impl Strategy<Value = RopeKind> {
    prop_oneof![Just(RopeKind::Vanilla1d), Just(RopeKind::Mrope)]
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, d)
}

fn position() -> impl Strategy<Value = Position> {
    (0u64..512, 0u64..64, 0u64..64).prop_map(|(t, h, w)| Position { t, h, w })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scores_depend_only_on_offsets(kind in kind_strategy(), q in vector(32), k in vector(32),
                                     pq in position(), pk in position(), shift in 0u64..4096) {
        let s = spec(kind, 32);
        let base = relative_score(&s, &q, &k, pq, pk, Retained::All).unwrap();
        let moved = relative_score(&s, &q, &k, pq.shifted(shift), pk.shifted(shift), Retained::All).unwrap();
        prop_assert!((base - moved).abs() <= 1e-10 * (1.0 + base.abs()), "{} vs {}", base, moved);
    }

    #[test]
    fn rotation_preserves_norm(kind in kind_strategy(), v in vector(32), p in position(),
                               subset in proptest::collection::btree_set(0usize..16, 0..16)) {
        let s = spec(kind, 32);
        let subset: Vec<usize> = subset.into_iter().collect();
        for retained in [Retained::All, Retained::Subset(&subset)] {
            let r = apply_rope(&s, &v, p, retained).unwrap();
            prop_assert!((norm2(&r) - norm2(&v)).abs() <= 1e-12 * norm2(&v).max(1.0));
        }
    }

    #[test]
    fn mrope_matches_vanilla_on_text(v in vector(64), i in 0u64..100_000) {
        let a = apply_rope(&spec(RopeKind::Mrope, 64), &v, Position::uniform(i), Retained::All).unwrap();
        let b = apply_rope(&spec(RopeKind::Vanilla1d, 64), &v, Position::uniform(i), Retained::All).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn keeping_every_subspace_is_full_rope(kind in kind_strategy(), v in vector(32), p in position()) {
        let s = spec(kind, 32);
        let all: Vec<usize> = (0..16).collect();
        prop_assert_eq!(
            apply_rope(&s, &v, p, Retained::Subset(&all)).unwrap(),
            apply_rope(&s, &v, p, Retained::All).unwrap()
        );
    }

    #[test]
    fn position_zero_is_identity(kind in kind_strategy(), v in vector(32)) {
        let s = spec(kind, 32);
        prop_assert_eq!(apply_rope(&s, &v, Position::default(), Retained::All).unwrap(), v);
    }

    #[test]
    fn empty_subset_is_nope(kind in kind_strategy(), v in vector(32), p in position()) {
        let s = spec(kind, 32);
        prop_assert_eq!(apply_rope(&s, &v, p, Retained::Subset(&[])).unwrap(), v);
    }
}
