use std::collections::BTreeMap;

use orchestra_core::runtime::{ParamSpec, Token, TriggerPolicy, TriggerState};
use orchestra_core::value::{SemanticType, Value};
use proptest::prelude::*;
use serde_json::json;

fn places(n: usize) -> Vec<ParamSpec> {
    (0..n)
        .map(|i| ParamSpec::new(&format!("p{i}"), SemanticType::Text))
        .collect()
}

/// Up to 4 places and 20 deposits, each naming a place and a key.
fn interleaving() -> impl Strategy<Value = (usize, Vec<(usize, u8)>)> {
    (1usize..=4).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0u8..3), 0..=20)))
}

fn keyed(key: u8, serial: usize) -> Token {
    Token::new(Value::Record(
        [
            ("k".to_string(), json!(key.to_string())),
            ("n".to_string(), json!(serial)),
        ]
        .into_iter()
        .collect(),
    ))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn all_places_fires_min_depth_times_and_conserves_tokens((n, deposits) in interleaving()) {
        let mut state = TriggerState::new(&places(n), TriggerPolicy::AllPlaces);
        let mut deposited = vec![0usize; n];
        let mut consumed = vec![0usize; n];
        let mut firings = 0;
        let mut next = vec![0usize; n];
        for (serial, (p, _)) in deposits.iter().enumerate() {
            state.deposit(&format!("p{p}"), Token::new(Value::text(serial.to_string()))).unwrap();
            deposited[*p] += 1;
            for tuple in state.fire() {
                firings += 1;
                prop_assert_eq!(tuple.len(), n);
                for (i, c) in consumed.iter_mut().enumerate() {
                    *c += 1;
                    // FIFO: the i-th firing consumes the i-th token of each place.
                    let want = deposits
                        .iter()
                        .enumerate()
                        .filter(|(_, (q, _))| *q == i)
                        .nth(next[i])
                        .map(|(s, _)| Value::text(s.to_string()));
                    prop_assert_eq!(tuple.get(&format!("p{i}")).cloned(), want);
                    next[i] += 1;
                }
            }
        }
        prop_assert_eq!(firings, *deposited.iter().min().unwrap());
        for i in 0..n {
            prop_assert_eq!(deposited[i], consumed[i] + state.depth(&format!("p{i}")));
        }
    }

    #[test]
    fn paired_fires_only_on_complete_key_groups((n, deposits) in interleaving()) {
        let policy = TriggerPolicy::Paired { key: "k".into() };
        let mut state = TriggerState::new(&places(n), policy);
        let mut counts: BTreeMap<(usize, u8), usize> = BTreeMap::new();
        let mut consumed = vec![0usize; n];
        let mut firings = 0;
        for (serial, (p, key)) in deposits.iter().enumerate() {
            state.deposit(&format!("p{p}"), keyed(*key, serial)).unwrap();
            *counts.entry((*p, *key)).or_default() += 1;
            for tuple in state.fire() {
                firings += 1;
                prop_assert_eq!(tuple.len(), n);
                let keys: Vec<Value> = tuple
                    .values()
                    .map(|v| match v {
                        Value::Record(r) => Value::text(r["k"].as_str().unwrap()),
                        other => other.clone(),
                    })
                    .collect();
                prop_assert!(keys.windows(2).all(|w| w[0] == w[1]), "{:?}", keys);
                for c in consumed.iter_mut() {
                    *c += 1;
                }
            }
        }
        let expected: usize = (0u8..3)
            .map(|k| (0..n).map(|p| counts.get(&(p, k)).copied().unwrap_or(0)).min().unwrap())
            .sum();
        prop_assert_eq!(firings, expected);
        for (i, c) in consumed.iter().enumerate() {
            let deposited: usize = (0u8..3).map(|k| counts.get(&(i, k)).copied().unwrap_or(0)).sum();
            prop_assert_eq!(deposited, c + state.depth(&format!("p{i}")));
        }
    }
}
