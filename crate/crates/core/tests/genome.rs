mod support;

use moncae_core::genome::{mutate, random_genome, repair, DROPOUT_PALETTE, LEARNING_RATE_PALETTE};
use moncae_core::nn::Activation;
use moncae_core::{Genome, GenomeLimits, OptimizerId};
use support::genome_sweep::{sweep, SHAPES};

#[test]
fn decode_of_repair_never_fails_on_ten_thousand_genomes_per_shape() {
    for shape in SHAPES {
        let r = sweep(shape, 10_000, 250);
        assert_eq!(r.checked, 10_000);
        assert!(r.forward_checked >= 40);
        assert!(
            r.errors.is_empty(),
            "{:#?}",
            &r.errors[..r.errors.len().min(5)]
        );
    }
}

#[test]
fn rate_one_mutation_resamples_every_field() {
    // Large enough that four pools never need trimming.
    let limits = GenomeLimits::new(4, 32, [64, 64, 1]).unwrap();
    let g = random_genome(&limits, 46);
    let trials = 1000;
    // (field, expected fraction differing = 1 - 1/|domain|, observed count)
    let mut fields: Vec<(&str, f64, usize)> = vec![
        ("active", 0.5, 0),
        ("filters", 1.0 - 1.0 / 32.0, 0),
        ("activation", 1.0 - 1.0 / Activation::ALL.len() as f64, 0),
        ("batchnorm", 0.5, 0),
        ("dropout", 1.0 - 1.0 / DROPOUT_PALETTE.len() as f64, 0),
        ("optimizer", 1.0 - 1.0 / OptimizerId::ALL.len() as f64, 0),
        (
            "learning_rate",
            1.0 - 1.0 / LEARNING_RATE_PALETTE.len() as f64,
            0,
        ),
    ];
    let mut gene_trials = 0usize;
    for seed in 0..trials {
        let m = mutate(&g, 1.0, &limits, seed);
        assert_eq!(repair(&m, &limits), m);
        // Gene 0 is skipped: repair may force it active.
        for (a, b) in g.layers.iter().zip(&m.layers).skip(1) {
            gene_trials += 1;
            fields[0].2 += (a.active != b.active) as usize;
            fields[1].2 += (a.filters != b.filters) as usize;
            fields[2].2 += (a.activation != b.activation) as usize;
            fields[3].2 += (a.batchnorm != b.batchnorm) as usize;
            fields[4].2 += (a.dropout != b.dropout) as usize;
        }
        fields[5].2 += (g.optimizer != m.optimizer) as usize;
        fields[6].2 += (g.learning_rate != m.learning_rate) as usize;
    }
    for (i, (name, expected, count)) in fields.iter().enumerate() {
        let n = if i < 5 { gene_trials } else { trials as usize };
        let observed = *count as f64 / n as f64;
        assert!(
            (observed - expected).abs() <= 0.05,
            "{name}: {observed} vs {expected}"
        );
    }
}

#[test]
fn mutation_and_crossover_stay_valid() {
    use moncae_core::genome::{crossover, decode};
    for shape in SHAPES {
        let limits = GenomeLimits::new(5, 16, shape).unwrap();
        for seed in 0..300 {
            let a = random_genome(&limits, seed);
            let b = random_genome(&limits, seed + 10_000);
            let child = crossover(&a, &b, &limits, seed).unwrap();
            let m = mutate(&child, 0.3, &limits, seed);
            for g in [&child, &m] {
                assert_eq!(&repair(g, &limits), g);
                decode(g, &limits).unwrap();
            }
        }
    }
}

#[test]
fn text_form_round_trips_for_random_genomes() {
    for shape in SHAPES {
        let limits = GenomeLimits::new(6, 64, shape).unwrap();
        for seed in 0..500 {
            let g = mutate(&random_genome(&limits, seed), 0.5, &limits, seed);
            let back: Genome = g.to_string().parse().unwrap();
            assert_eq!(back, g);
        }
    }
}
