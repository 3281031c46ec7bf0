use proptest::prelude::*;

use atr_core::rng::seeded;
use atr_core::taskspace::{
    canonical_deserialize, canonical_serialize, sample_prior, validate, PriorConfig, Skill, CANONICAL_WIDTH,
};

fn prior_cfg() -> impl Strategy<Value = PriorConfig> {
    (2usize..=6, 0usize..=4, 1usize..=2, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(lo, extra, ctx, stack, nextto)| PriorConfig {
        min_objects: lo,
        max_objects: (lo + extra).min(6),
        contexts_per_task: ctx,
        stack_prob: stack,
        nextto_prob: nextto,
        ..PriorConfig::default()
    })
}

proptest! {
    #[test]
    fn canonical_vector_round_trips(seed in any::<u64>(), cfg in prior_cfg()) {
        let w = sample_prior(&mut seeded(seed), &cfg).unwrap();
        prop_assert!(validate(&w).is_valid());
        let v = canonical_serialize(&w).unwrap();
        prop_assert_eq!(v.len(), CANONICAL_WIDTH);
        prop_assert_eq!(canonical_deserialize(&v).unwrap(), w);
    }

    #[test]
    fn typed_contexts_name_an_acceptable_target(seed in any::<u64>()) {
        let cfg = PriorConfig { typed_context_prob: 1.0, ..PriorConfig::default() };
        let w = sample_prior(&mut seeded(seed), &cfg).unwrap();
        for c in &w.contexts {
            let any_target = w.objects.iter().any(|o| o.id != c.i && c.skill.accepts_target(o.kind));
            let kind = w.object(c.j).unwrap().kind;
            prop_assert!(!any_target || c.skill.accepts_target(kind), "{} -> {:?}", c, kind);
        }
    }
}

#[test]
fn untyped_contexts_reach_every_kind() {
    let cfg = PriorConfig { typed_context_prob: 0.0, skill_weights: [0.0, 0.0, 1.0, 0.0], ..PriorConfig::default() };
    let mut rng = seeded(4);
    let (mut rack, mut other) = (0, 0);
    for _ in 0..500 {
        let w = sample_prior(&mut rng, &cfg).unwrap();
        let c = w.contexts[0];
        assert_eq!(c.skill, Skill::PushUnder);
        if Skill::PushUnder.accepts_target(w.object(c.j).unwrap().kind) {
            rack += 1;
        } else {
            other += 1;
        }
    }
    assert!(rack > 0 && other > rack, "{rack} {other}");
}
