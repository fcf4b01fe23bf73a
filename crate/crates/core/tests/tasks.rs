use std::collections::{HashSet, VecDeque};

use latentkv::tasks::countdown::{answer_tokens, OPERAND_MAX, OPERAND_MIN, TARGET_MAX};
use latentkv::tasks::tokenizer::{LATENT, VOCAB_SIZE};
use latentkv::tasks::*;
use latentkv::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn worked_instance() -> CountdownInstance {
    CountdownInstance {
        nums: vec![19, 36, 55, 7],
        target: 65,
        solution: Some("55 + 36 - 7 - 19".into()),
        n_operands: 4,
    }
}

/// Ordinary semantics, any intermediate sign: combine any two, recurse.
fn naive_reachable(vals: &[i64], target: i64) -> bool {
    if vals.len() == 1 {
        return vals[0] == target;
    }
    for i in 0..vals.len() {
        for j in 0..vals.len() {
            if i == j {
                continue;
            }
            let rest: Vec<i64> = (0..vals.len()).filter(|&k| k != i && k != j).map(|k| vals[k]).collect();
            let (a, b) = (vals[i], vals[j]);
            let mut cands = vec![a + b, a - b, a * b];
            if b != 0 && a % b == 0 {
                cands.push(a / b);
            }
            for c in cands {
                let mut next = rest.clone();
                next.push(c);
                if naive_reachable(&next, target) {
                    return true;
                }
            }
        }
    }
    false
}

#[test]
fn tokenizer_basics() {
    let tok = Tokenizer;
    assert_eq!(tok.decode(&tok.encode("abc")), "abc");
    assert_eq!(tok.vocab_size(), VOCAB_SIZE);
    assert!((0..256).all(|b| !tok.is_special(b)));
    assert!((256..VOCAB_SIZE).all(|s| tok.is_special(s)));
}

proptest! {
    #[test]
    fn byte_strings_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let tok = Tokenizer;
        prop_assert_eq!(tok.decode_bytes(&tok.encode_bytes(&bytes)), bytes);
    }

    #[test]
    fn printed_expressions_reparse_to_same_value(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=5);
        let inst = gen_countdown(n, &mut rng).unwrap();
        let s = inst.solution.clone().unwrap();
        let e = Expr::parse(&s).unwrap();
        prop_assert_eq!(e.to_string(), s);
        prop_assert_eq!(e.eval(), Some(inst.target));
    }
}

#[test]
fn worked_instance_is_representable() {
    let inst = worked_instance();
    assert!(inst.verify());
    assert!(solve_countdown(&inst.nums, 65).is_some());
    assert!(score_countdown("<answer> 55+36−7−19 </answer>", &inst).is_correct());
    assert_eq!(
        render_countdown(&inst),
        "User: Using the numbers [19, 36, 55, 7], create an equation that equals 65.\n\
         Assistant: Let me solve this step by step.\n<latent thinking>\n<answer> 55 + 36 - 7 - 19 </answer>"
    );
}

#[test]
fn small_solver_cases() {
    let s = solve_countdown(&[2, 3], 6).unwrap();
    assert_eq!(Expr::parse(&s).unwrap().eval(), Some(6));
    assert!(s.contains('*'));
    assert_eq!(solve_countdown(&[2, 2], 5), None);
}

#[test]
fn branching_factor_values() {
    let want = [1u128, 4, 48, 960, 26_880];
    for (n, &w) in (1..=5).zip(&want) {
        assert_eq!(branching_factor(n).unwrap(), w, "n = {}", n);
        assert_eq!(enumeration_count(n), w, "n = {}", n);
    }
    assert!(branching_factor(0).is_err());
}

#[test]
fn solver_complete_on_all_pairs() {
    for a in 1..=10i64 {
        for b in 1..=10i64 {
            let mut reach: HashSet<i64> = HashSet::from([a + b, a - b, b - a, a * b]);
            if a % b == 0 {
                reach.insert(a / b);
            }
            if b % a == 0 {
                reach.insert(b / a);
            }
            for target in 0..=200 {
                let got = solve_countdown(&[a, b], target);
                assert_eq!(got.is_some(), reach.contains(&target), "{} {} -> {}", a, b, target);
                if let Some(s) = got {
                    let inst = CountdownInstance {
                        nums: vec![a, b],
                        target,
                        solution: Some(s),
                        n_operands: 2,
                    };
                    assert!(inst.verify());
                }
            }
        }
    }
}

#[test]
fn solver_agrees_with_naive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let n = rng.random_range(2..=4);
        let nums: Vec<i64> = (0..n).map(|_| rng.random_range(1..=12)).collect();
        let target = rng.random_range(0..=60);
        assert_eq!(
            solve_countdown(&nums, target).is_some(),
            naive_reachable(&nums, target),
            "{:?} -> {}",
            nums,
            target
        );
    }
}

#[test]
fn generated_instances_are_valid_and_solvable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..10_000 {
        let n = 3 + i % 3;
        let inst = gen_countdown(n, &mut rng).unwrap();
        assert_eq!(inst.nums.len(), n);
        assert!(inst.nums.iter().all(|v| (OPERAND_MIN..=OPERAND_MAX).contains(v)));
        assert!((0..=TARGET_MAX).contains(&inst.target));
        assert!(inst.verify(), "{:?}", inst);
        let witness = solve_countdown(&inst.nums, inst.target).expect("solver finds a witness");
        let check = CountdownInstance {
            solution: Some(witness),
            ..inst.clone()
        };
        assert!(check.verify());
    }
    assert!(gen_countdown(2, &mut rng).is_err());
    assert!(gen_countdown(6, &mut rng).is_err());
}

#[test]
fn generation_is_deterministic() {
    let a = gen_countdown(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = gen_countdown(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unfiltered_instances_carry_solver_result() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let inst = gen_countdown_unfiltered(3, &mut rng).unwrap();
        assert_eq!(inst.solution.is_some(), naive_reachable(&inst.nums, inst.target));
        if inst.solution.is_some() {
            assert!(inst.verify());
        }
    }
}

#[test]
fn formatting_round_trips() {
    let inst = worked_instance();
    let f = format_countdown(&inst, 5).unwrap();
    let text = Tokenizer.decode(&f.answer);
    assert_eq!(parse_answer(&text), inst.solution.as_deref());
    assert_eq!(f.layout().iter().filter(|&&t| t == LATENT).count(), 5);
    assert_eq!(f.answer, answer_tokens("55 + 36 - 7 - 19"));
    assert!(Tokenizer.decode(&f.prompt).ends_with("step by step.\n"));
}

#[test]
fn scoring_rules() {
    let inst = CountdownInstance {
        nums: vec![2, 3, 4],
        target: 10,
        solution: Some("2 * 3 + 4".into()),
        n_operands: 3,
    };
    assert!(score_countdown("<answer>4+2×3</answer>", &inst).is_correct());
    assert!(score_countdown("<answer> (3 * 2) + 4 </answer> trailing", &inst).is_correct());
    assert_eq!(score_countdown("2 * 3 + 4", &inst), ScoreOutcome::ParseFailure);
    assert_eq!(
        score_countdown("<answer> 2 * * 3 </answer>", &inst),
        ScoreOutcome::ParseFailure
    );
    // right value, operand reused
    assert_eq!(
        score_countdown("<answer> 3 + 3 + 4 </answer>", &inst),
        ScoreOutcome::Wrong
    );
    // right value, operand missing
    assert_eq!(
        score_countdown("<answer> 2 * 4 + 2 </answer>", &inst),
        ScoreOutcome::Wrong
    );
    // fractional intermediate
    let half = CountdownInstance {
        nums: vec![3, 2, 4],
        target: 6,
        solution: None,
        n_operands: 3,
    };
    assert_eq!(
        score_countdown("<answer> 3 / 2 * 4 </answer>", &half),
        ScoreOutcome::Wrong
    );
}

fn bfs(inst: &GraphQAInstance, from: usize) -> HashSet<usize> {
    let mut seen = HashSet::from([from]);
    let mut q = VecDeque::from([from]);
    while let Some(u) = q.pop_front() {
        for &(a, b) in &inst.edges {
            if a == u && seen.insert(b) {
                q.push_back(b);
            }
        }
    }
    seen
}

fn is_acyclic(inst: &GraphQAInstance) -> bool {
    let n = inst.entities.len();
    let mut indeg = vec![0; n];
    for &(_, b) in &inst.edges {
        indeg[b] += 1;
    }
    let mut q: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut visited = 0;
    while let Some(u) = q.pop_front() {
        visited += 1;
        for &(a, b) in &inst.edges {
            if a == u {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    q.push_back(b);
                }
            }
        }
    }
    visited == n
}

#[test]
fn graph_labels_match_bfs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..1000 {
        let depth = 1 + i % 4;
        let inst = gen_graph_qa(depth, 3, &mut rng).unwrap();
        assert!(is_acyclic(&inst));
        let reach = bfs(&inst, inst.source);
        assert!(reach.contains(&inst.candidates[inst.label]));
        assert!(!reach.contains(&inst.candidates[1 - inst.label]));
        assert_eq!(inst.steps.len(), depth);
        assert_eq!(inst.steps.last().unwrap(), &inst.answer);
    }
}

#[test]
fn depth_one_is_direct_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inst = gen_graph_qa(1, 3, &mut rng).unwrap();
    let target = inst.candidates[inst.label];
    assert!(inst.edges.contains(&(inst.source, target)));
    assert_eq!(inst.steps.len(), 1);
}

#[test]
fn corpus_windows_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.txt");
    std::fs::write(&p, "hello world, hello corpus").unwrap();
    let w = ingest_text_corpus(&p, 8).unwrap();
    assert_eq!(w.len(), 3);
    assert_eq!(Tokenizer.decode(&w[0]), "hello wo");
    let bad = dir.path().join("b.txt");
    std::fs::write(&bad, [b'o', b'k', 0xff, b'x']).unwrap();
    match ingest_text_corpus(&bad, 2) {
        Err(Error::Malformed { offset, .. }) => assert_eq!(offset, 2),
        other => panic!("expected malformed error, got {:?}", other),
    }
    // directory ingestion reads .txt files in name order
    let sub = dir.path().join("d");
    std::fs::create_dir(&sub).unwrap();
    std::fs::write(sub.join("2.txt"), "bb").unwrap();
    std::fs::write(sub.join("1.txt"), "aa").unwrap();
    assert_eq!(Tokenizer.decode(&ingest_text_corpus(&sub, 4).unwrap()[0]), "aabb");
    assert!(matches!(
        ingest_text_corpus(&dir.path().join("missing"), 4),
        Err(Error::Io { .. })
    ));
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let a = synthetic_corpus(5000, 3);
    assert_eq!(a.len(), 5000);
    assert_eq!(a, synthetic_corpus(5000, 3));
    assert_ne!(a, synthetic_corpus(5000, 4));
}

#[test]
fn datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cd: Vec<CountdownInstance> = (0..50).map(|_| gen_countdown(4, &mut rng).unwrap()).collect();
    let p = dir.path().join("cd.jsonl");
    write_jsonl(&p, &cd).unwrap();
    assert_eq!(read_jsonl::<CountdownInstance>(&p).unwrap(), cd);
    let line = std::fs::read_to_string(&p).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["nums", "target", "solution", "n_operands"] {
        assert!(first.get(key).is_some(), "missing {}", key);
    }
    let gq: Vec<GraphQAInstance> = (0..20).map(|_| gen_graph_qa(3, 3, &mut rng).unwrap()).collect();
    let p = dir.path().join("gq.jsonl");
    write_jsonl(&p, &gq).unwrap();
    assert_eq!(read_jsonl::<GraphQAInstance>(&p).unwrap(), gq);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"question\":\"q\",\"answer\":\"a\"}\nnot json\n").unwrap();
    match read_jsonl::<CotRecord>(&bad) {
        Err(Error::Malformed { offset, .. }) => assert_eq!(offset, 30),
        other => panic!("expected malformed, got {:?}", other),
    }
}

#[test]
fn cot_examples_from_tasks() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = gen_graph_qa(3, 3, &mut rng).unwrap();
    let ex = CotExample::from_graph(&g);
    assert_eq!(ex.steps.len(), 3);
    let c = CotExample::from_countdown(&worked_instance()).unwrap();
    assert!(c.steps.is_empty());
    assert_eq!(c.answer, answer_tokens("55 + 36 - 7 - 19"));
}
