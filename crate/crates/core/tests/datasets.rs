use std::collections::{HashMap, HashSet};

use ntil::data::{gen_arithmetic, gen_clock, split, ArithOp, ArithmeticSpec, ClockTime};
use ntil::vocab::Vocabulary;

#[test]
fn answer_lengths_follow_the_operand_space() {
    // every ordered pair of operands in 0..1000
    let mut exact = [0u64; 5];
    for a in 0..1000u64 {
        for b in 0..1000u64 {
            exact[(a + b).to_string().len()] += 1;
        }
    }
    let n = 10_000;
    let examples = gen_arithmetic(&ArithmeticSpec::addition(n, 2024, 3)).unwrap();
    let mut seen = [0usize; 5];
    for e in &examples {
        seen[e.target.len()] += 1;
    }
    for len in 1..5 {
        let want = exact[len] as f64 / 1e6;
        let got = seen[len] as f64 / n as f64;
        assert!((got - want).abs() <= 0.02, "length {len}: {got} vs {want}");
    }
}

#[test]
fn mixed_operators_stay_exact() {
    let spec = ArithmeticSpec {
        n: 2000,
        seed: 9,
        max_digits: 4,
        ops: vec![ArithOp::Add, ArithOp::Sub, ArithOp::Mul],
        decimal: false,
    };
    let examples = gen_arithmetic(&spec).unwrap();
    let mut ops = HashSet::new();
    for e in &examples {
        assert_eq!(ntil::data::recompute_answer(&e.prompt).as_deref(), Some(e.target.as_str()));
        ops.insert(e.prompt.chars().find(|c| ArithOp::from_symbol(*c).is_some()).unwrap());
    }
    assert_eq!(ops.len(), 3);
}

#[test]
fn clock_classes_are_balanced() {
    let examples = gen_clock(50_000, 3).unwrap();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in &examples {
        assert!(ClockTime::parse(&e.target).is_some(), "{}", e.target);
        *counts.entry(&e.target).or_default() += 1;
    }
    assert_eq!(counts.len(), 144);
    let expected = 50_000.0 / 144.0;
    for (label, c) in counts {
        assert!((c as f64 - expected).abs() <= 0.03 * expected, "{label}: {c}");
    }
}

#[test]
fn splits_share_no_prompt() {
    let examples = gen_arithmetic(&ArithmeticSpec::addition(5000, 1, 2)).unwrap();
    let (train, test) = split(&examples, 0.2, 4).unwrap();
    assert_eq!(train.len() + test.len(), examples.len());
    let train_prompts: HashSet<&str> = train.iter().map(|e| e.prompt.as_str()).collect();
    assert!(test.iter().all(|e| !train_prompts.contains(e.prompt.as_str())));
}

#[test]
fn every_target_is_one_recoverable_number() {
    let vocab = Vocabulary::default();
    let spec = ArithmeticSpec {
        decimal: true,
        ..ArithmeticSpec::addition(3000, 5, 3)
    };
    for e in gen_arithmetic(&spec).unwrap().iter().chain(&gen_clock(300, 5).unwrap()) {
        let ids = vocab.encode(&e.target).unwrap();
        let values: Vec<f64> = vocab
            .find_digit_spans(&ids)
            .iter()
            .map(|s| vocab.span_value(&ids, s).unwrap())
            .collect();
        let expected: Vec<f64> = e
            .target
            .split(|c: char| !(c.is_ascii_digit() || c == '.'))
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(values, expected, "{}", e.target);
    }
}
