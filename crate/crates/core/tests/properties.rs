mod common;

use proptest::prelude::*;
use qmbias::gateway::{classify_token, TokenClass, YesNoMass};
use qmbias::metrics::{bias, centered_sd, pearson, personalization_accuracy, predict, std_bias};
use qmbias::orchestrator::subsample_respondents;
use qmbias::prompt::{derive_ablation_specs, AblationKind, ContextSpec};

fn mass() -> impl Strategy<Value = (f64, f64)> {
    (0.0..=1.0f64, 0.0..=1.0f64).prop_filter("sum at most one", |(y, n)| y + n <= 1.0)
}

proptest! {
    #[test]
    fn prediction_agrees_with_normalized_probability((y, n) in mass()) {
        let p = predict(YesNoMass::new(y, n));
        if y == 0.0 && n == 0.0 {
            prop_assert_eq!(p.label, -1);
            prop_assert!(p.p_yes_norm.is_none());
        } else {
            let norm = p.p_yes_norm.unwrap();
            prop_assert!((0.0..=1.0).contains(&norm));
            prop_assert_eq!(p.label == 1, norm >= 0.5);
        }
    }

    #[test]
    fn bias_matches_mean_difference(
        rows in prop::collection::vec((prop::option::of(0.0..=1.0f64), any::<bool>()), 1..60)
    ) {
        prop_assume!(rows.iter().any(|(p, _)| p.is_some()));
        let (ps, gold): (Vec<_>, Vec<_>) = rows.iter().cloned().unzip();
        let b = bias(&ps, &gold).unwrap();
        let defined: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|(p, g)| p.map(|p| (p, f64::from(u8::from(*g)))))
            .collect();
        let k = defined.len() as f64;
        let naive = defined.iter().map(|(p, g)| p - g).sum::<f64>() / k;
        prop_assert_eq!(b.n, defined.len());
        prop_assert!(common::close(b.bias, naive, 1e-12));
        prop_assert!((-1.0..=1.0).contains(&b.bias));
    }

    #[test]
    fn accuracy_counts_exact_matches(
        rows in prop::collection::vec((-1i8..=1, any::<bool>()), 1..80)
    ) {
        let (labels, gold): (Vec<_>, Vec<_>) = rows.iter().cloned().unzip();
        let a = personalization_accuracy(&labels, &gold).unwrap();
        let hits = rows.iter().filter(|(l, g)| *l == i8::from(*g)).count();
        prop_assert!(common::close(a.pa, hits as f64 / rows.len() as f64, 1e-15));
    }

    #[test]
    fn rms_dominates_spread_and_mean(bs in prop::collection::vec(-1.0..=1.0f64, 1..40)) {
        let rms = std_bias(&bs).unwrap();
        let sd = centered_sd(&bs).unwrap();
        let mean = bs.iter().sum::<f64>() / bs.len() as f64;
        // rms^2 = sd^2 + mean^2
        prop_assert!(common::close(rms * rms, sd * sd + mean * mean, 1e-12));
        prop_assert!(rms + 1e-12 >= sd && rms + 1e-12 >= mean.abs());
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..30),
        scale in 0.1..5.0f64,
        shift in -5.0..5.0f64,
    ) {
        let (xs, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!(common::close(r, pearson(&ys, &xs).unwrap(), 1e-12));
        let moved: Vec<f64> = xs.iter().map(|x| x * scale + shift).collect();
        prop_assert!(common::close(r, pearson(&moved, &ys).unwrap(), 1e-9));
        let flipped: Vec<f64> = xs.iter().map(|x| -x).collect();
        prop_assert!(common::close(-r, pearson(&flipped, &ys).unwrap(), 1e-12));
        prop_assert!(common::close(r, common::naive_pearson(&xs, &ys), 1e-9));
    }

    #[test]
    fn subsample_is_sorted_unique_and_sized(n in 1usize..500, factor in 1usize..20, seed: u64) {
        let s = subsample_respondents(n, factor, seed);
        let want = ((n as f64 / factor as f64).round() as usize).clamp(1, n);
        prop_assert_eq!(s.len(), want);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < n));
        prop_assert_eq!(s, subsample_respondents(n, factor, seed));
    }

    #[test]
    fn permutations_reorder_the_full_context(len in 2usize..40, count in 1usize..6, seed: u64) {
        let base = ContextSpec::full((0..len).collect());
        let kind = AblationKind::Permutation { count, same_last: count / 2 };
        let specs = derive_ablation_specs(&base, &kind, seed).unwrap();
        prop_assert_eq!(specs.len(), count);
        for s in &specs {
            let mut seq = s.sequence();
            if s.keep_last {
                prop_assert_eq!(seq.last().copied(), Some(len - 1));
            }
            seq.sort_unstable();
            prop_assert_eq!(seq, (0..len).collect::<Vec<_>>());
        }
    }

    #[test]
    fn token_class_ignores_case_and_padding(
        word in prop::sample::select(vec!["yes", "no"]),
        upper in prop::collection::vec(any::<bool>(), 3),
        pad in "[ \t\n]{0,3}",
    ) {
        let cased: String = word
            .chars()
            .zip(upper.iter().cycle())
            .map(|(c, u)| if *u { c.to_ascii_uppercase() } else { c })
            .collect();
        let want = if word == "yes" { TokenClass::Yes } else { TokenClass::No };
        prop_assert_eq!(classify_token(&format!("{pad}{cased}{pad}")), want);
        prop_assert_eq!(classify_token(&format!("{cased}.")), TokenClass::Other);
    }
}
