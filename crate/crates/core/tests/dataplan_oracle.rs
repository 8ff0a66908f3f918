mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use common::*;
use orchestra_core::dataplan::OpKind;
use orchestra_core::optimizer::ConstraintSet;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Row = BTreeMap<String, String>;

fn rows(dir: &Path, file: &str) -> Vec<Row> {
    let mut rdr = csv::Reader::from_path(dir.join("data").join(file)).unwrap();
    rdr.deserialize().map(|r| r.unwrap()).collect()
}

fn ids_of(v: &orchestra_core::value::Value) -> BTreeSet<String> {
    v.as_table().unwrap().column_text("id").unwrap().into_iter().collect()
}

/// Labels within `max` undirected hops of `root`, lowercased.
fn within_hops(edges: &[Row], root: &str, max: usize) -> BTreeSet<String> {
    let mut adj: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in edges {
        let (a, b) = (e["parent"].to_lowercase(), e["child"].to_lowercase());
        adj.entry(a.clone()).or_default().push(b.clone());
        adj.entry(b).or_default().push(a);
    }
    let mut seen = BTreeMap::from([(root.to_lowercase(), 0usize)]);
    let mut queue = VecDeque::from([root.to_lowercase()]);
    while let Some(n) = queue.pop_front() {
        let d = seen[&n];
        if d == max {
            continue;
        }
        for m in adj.get(&n).into_iter().flatten() {
            if !seen.contains_key(m) {
                seen.insert(m.clone(), d + 1);
                queue.push_back(m.clone());
            }
        }
    }
    seen.into_keys().collect()
}

#[test]
fn decomposed_bay_area_plan_matches_brute_force() {
    let (dir, k) = kernel();
    let cities: BTreeSet<String> = rows(dir.path(), "bay_area_cities.csv")
        .into_iter()
        .map(|r| r["city"].clone())
        .collect();
    let titles = within_hops(&rows(dir.path(), "title_taxonomy.csv"), "data scientist", 2);
    let expected: BTreeSet<String> = rows(dir.path(), "jobs.csv")
        .into_iter()
        .filter(|r| cities.contains(&r["city"]) && titles.contains(&r["title"].to_lowercase()))
        .map(|r| r["id"].clone())
        .collect();
    assert!(expected.len() > 5);

    let plans = k
        .data_planner
        .plan_query("data scientist position in SF bay area")
        .unwrap();
    assert!(plans.len() >= 2);
    for p in &plans {
        assert!(!p.is_relational_only());
        assert!(p
            .substitutions
            .iter()
            .any(|s| s.field == "city" && s.via == OpKind::ModelCall));
        let (v, _) = k.data_planner.execute(p, None).unwrap();
        assert_eq!(ids_of(&v), expected, "plan {}", p.id);
    }
    let chosen = k.data_planner.choose(plans, &ConstraintSet::default()).unwrap();
    let (v, _) = k.data_planner.execute(&chosen, None).unwrap();
    assert_eq!(ids_of(&v), expected);
}

/// First `n` words of `s`, at least one.
fn words(s: &str, n: usize) -> String {
    let w: Vec<&str> = s.split_whitespace().collect();
    w[..n.clamp(1, w.len())].join(" ")
}

fn starts(value: &str, prefix: &str) -> bool {
    value.to_lowercase().starts_with(&prefix.to_lowercase())
}

#[test]
fn relational_plans_equal_direct_predicate_evaluation() {
    let (dir, k) = kernel();
    let jobs = rows(dir.path(), "jobs.csv");
    let n = jobs.len();
    let strategy = (0..n, 0..n, 0..n, 1usize..3, 1usize..3, any::<bool>(), any::<bool>());
    let mut runner = TestRunner::new(Config {
        cases: 100,
        rng_seed: proptest::test_runner::RngSeed::Fixed(7),
        ..Config::default()
    });
    runner
        .run(&strategy, |(ti, ci, yi, tw, cw, with_company, with_city)| {
            let title = words(&jobs[ti]["title"], tw);
            let company = words(&jobs[ci]["company"], cw);
            let city = jobs[yi]["city"].clone();
            let mut nl = format!("{title} jobs");
            if with_company {
                nl.push_str(&format!(" at {company}"));
            }
            if with_city {
                nl.push_str(&format!(" in {city}"));
            }
            let expected: BTreeSet<String> = jobs
                .iter()
                .filter(|r| starts(&r["title"], &title))
                .filter(|r| !with_company || starts(&r["company"], &company))
                .filter(|r| !with_city || starts(&r["city"], &city))
                .map(|r| r["id"].clone())
                .collect();
            let plans = k.data_planner.plan_query(&nl).unwrap();
            prop_assert_eq!(plans.len(), 1, "{}", nl);
            prop_assert!(plans[0].is_relational_only(), "{}", nl);
            let (v, _) = k.data_planner.execute(&plans[0], None).unwrap();
            prop_assert_eq!(ids_of(&v), expected, "{}", nl);
            Ok(())
        })
        .unwrap();
}
