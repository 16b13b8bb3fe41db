//! Seeded random scenarios for property and acceptance tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    CloudSpec, FailureInjection, InjectionKind, Scenario, ServiceSpec, TimedRequest, Topology,
};
use crate::aggregation::OutputStandard;
use crate::fault::FaultPolicy;
use crate::model::{ConsumerRequest, DistributionMode, ModuleSpec, ProductSpec, TechniqueSpec};

const TECHNIQUES: [&str; 5] = ["unit", "functional", "structural", "mutation", "regression"];

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub max_products: usize,
    pub min_failures: usize,
    pub max_failures: usize,
    /// Whether failed services may come back later.
    pub recoveries: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            max_products: 4,
            min_failures: 0,
            max_failures: 0,
            recoveries: true,
        }
    }
}

impl GenConfig {
    pub fn with_failures(min: usize, max: usize) -> Self {
        Self {
            min_failures: min,
            max_failures: max,
            ..Self::default()
        }
    }
}

/// A valid scenario drawn from `seed`. Each topology service fails at most
/// once, so every injected crash hits a live service.
pub fn random_scenario(seed: u64, config: &GenConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let technique_count = rng.gen_range(2..=4);
    let catalog: Vec<TechniqueSpec> = TECHNIQUES[..technique_count]
        .iter()
        .map(|t| TechniqueSpec {
            technique_id: (*t).into(),
            test_case_density: rng.gen_range(2..=10) as f64,
            avg_case_time: rng.gen_range(1..=3),
            avg_case_size: 1.0,
        })
        .collect();

    let mut clouds = Vec::new();
    let mut services = Vec::new();
    for t in &catalog {
        for _ in 0..rng.gen_range(1..=3) {
            let cloud_id = format!("C{}", clouds.len() + 1);
            let n = rng.gen_range(1..=3);
            let specs: Vec<ServiceSpec> = (1..=n)
                .map(|k| ServiceSpec {
                    service_id: format!("{cloud_id}-s{k}").into(),
                    capacity: *[0.5, 1.0, 1.0, 2.0].choose(&mut rng).expect("non-empty"),
                })
                .collect();
            services.extend(specs.iter().map(|s| s.service_id.clone()));
            clouds.push(CloudSpec {
                cloud_id: cloud_id.into(),
                technique_id: t.technique_id.clone(),
                max_services: n + rng.gen_range(0..=3),
                services: specs,
            });
        }
    }

    let products = rng.gen_range(1..=config.max_products.max(1));
    let mut arrival = 0;
    let requests = (1..=products)
        .map(|i| {
            arrival += rng.gen_range(0..=15);
            let modules = (1..=rng.gen_range(1..=4))
                .map(|m| ModuleSpec {
                    module_id: format!("m{m}").into(),
                    size_kloc: rng.gen_range(2..=20) as f64 / 10.0,
                })
                .collect();
            let mut techniques: Vec<_> = catalog.iter().map(|t| t.technique_id.clone()).collect();
            techniques.shuffle(&mut rng);
            techniques.truncate(rng.gen_range(1..=3.min(catalog.len())));
            let mode = *[
                DistributionMode::Lpt,
                DistributionMode::RoundRobin,
                DistributionMode::WeightedByCapacity,
            ]
            .choose(&mut rng)
            .expect("non-empty");
            TimedRequest {
                arrival,
                request: ConsumerRequest {
                    product: ProductSpec {
                        product_id: format!("P{i}").into(),
                        modules,
                        defect_density_estimate: rng.gen_range(0..=20) as f64 / 10.0,
                    },
                    deadline: rng.gen_range(10..=120),
                    techniques,
                    distribution_mode: mode,
                },
            }
        })
        .collect();

    let failures = if config.max_failures == 0 {
        0
    } else {
        rng.gen_range(config.min_failures..=config.max_failures)
            .min(services.len())
    };
    services.shuffle(&mut rng);
    let mut failure_injections = Vec::new();
    for s in services.into_iter().take(failures) {
        let time = rng.gen_range(0..=80);
        failure_injections.push(FailureInjection {
            time,
            service_id: s.clone(),
            action: InjectionKind::Fail,
        });
        if config.recoveries && rng.gen_bool(0.5) {
            failure_injections.push(FailureInjection {
                time: time + rng.gen_range(1..=40),
                service_id: s,
                action: InjectionKind::Recover,
            });
        }
    }

    Scenario {
        seed: rng.gen(),
        catalog,
        topology: Topology { clouds },
        requests,
        failure_injections,
        latency: rng.gen_range(1..=2),
        policy: FaultPolicy::default(),
        output_standard: OutputStandard::default(),
    }
}
