//! Domain types shared by every other module: products, requests, technique
//! specs, testing services and clouds, product allocations and the registry.
//!
//! A product allocation mirrors the per-product cloud set: one Service Manager
//! binding plus the clouds (and their services) leased to the product. The
//! registry owns all clouds and the active allocations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time, in integer ticks. Real-runner mode uses milliseconds.
pub type Tick = u64;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Product under test.
    ProductId
);
id_type!(
    /// Testing technique (unit, functional, mutation, ...).
    TechniqueId
);
id_type!(
    /// A Testing Cloud.
    CloudId
);
id_type!(
    /// A Testing Service inside a cloud.
    ServiceId
);
id_type!(
    /// A Service Manager.
    ManagerId
);
id_type!(
    /// A module of a product.
    ModuleId
);
id_type!(
    /// A distributable unit of test work.
    TaskId
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub module_id: ModuleId,
    pub size_kloc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductSpec {
    pub product_id: ProductId,
    pub modules: Vec<ModuleSpec>,
    /// Expected defects per kloc. Only the simulated runner reads it.
    #[serde(default)]
    pub defect_density_estimate: f64,
}

impl ProductSpec {
    pub fn total_kloc(&self) -> f64 {
        self.modules.iter().map(|m| m.size_kloc).sum()
    }
}

/// How a cloud's tasks are spread over its services.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    RoundRobin,
    WeightedByCapacity,
    #[default]
    Lpt,
}

/// The Consumer Service input: product, time budget and techniques.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumerRequest {
    pub product: ProductSpec,
    pub deadline: Tick,
    pub techniques: Vec<TechniqueId>,
    #[serde(default)]
    pub distribution_mode: DistributionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueSpec {
    pub technique_id: TechniqueId,
    /// Test cases per kloc.
    pub test_case_density: f64,
    /// Ticks to generate and execute one test case at unit capacity.
    pub avg_case_time: Tick,
    /// Informational only; no decision reads it.
    pub avg_case_size: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "state", content = "product_id", rename_all = "snake_case")]
pub enum ServiceState {
    Free,
    Leased(ProductId),
    Failed,
}

impl ServiceState {
    /// Legal edges: Free→Leased, Leased→Free, any→Failed, Failed→Free.
    pub fn can_transition_to(&self, next: &ServiceState) -> bool {
        matches!(
            (self, next),
            (ServiceState::Free, ServiceState::Leased(_))
                | (ServiceState::Leased(_), ServiceState::Free)
                | (_, ServiceState::Failed)
                | (ServiceState::Failed, ServiceState::Free)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestingService {
    pub service_id: ServiceId,
    pub technique_id: TechniqueId,
    pub capacity: f64,
    pub state: ServiceState,
}

impl TestingService {
    pub fn new(
        service_id: impl Into<ServiceId>,
        technique_id: impl Into<TechniqueId>,
        capacity: f64,
    ) -> Self {
        Self {
            service_id: service_id.into(),
            technique_id: technique_id.into(),
            capacity,
            state: ServiceState::Free,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.state == ServiceState::Failed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestingCloud {
    pub cloud_id: CloudId,
    pub technique_id: TechniqueId,
    pub services: Vec<TestingService>,
    /// Upper bound on the number of services, clones included.
    pub max_services: usize,
}

impl TestingCloud {
    pub fn new(
        cloud_id: impl Into<CloudId>,
        technique_id: impl Into<TechniqueId>,
        max_services: usize,
        services: Vec<TestingService>,
    ) -> Result<Self, ModelError> {
        let cloud = Self {
            cloud_id: cloud_id.into(),
            technique_id: technique_id.into(),
            services,
            max_services,
        };
        cloud.check()?;
        Ok(cloud)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let id = &self.cloud_id;
        if self.max_services == 0 {
            return Err(ModelError::InvalidCloud(
                id.clone(),
                "max_services must be at least 1".into(),
            ));
        }
        if self.services.is_empty() || self.services.len() > self.max_services {
            return Err(ModelError::InvalidCloud(
                id.clone(),
                format!(
                    "service count {} outside 1..={}",
                    self.services.len(),
                    self.max_services
                ),
            ));
        }
        let mut seen = BTreeSet::new();
        for s in &self.services {
            if s.technique_id != self.technique_id {
                return Err(ModelError::InvalidCloud(
                    id.clone(),
                    format!(
                        "service {} serves {}, cloud serves {}",
                        s.service_id, s.technique_id, self.technique_id
                    ),
                ));
            }
            if !(s.capacity > 0.0 && s.capacity.is_finite()) {
                return Err(ModelError::InvalidCloud(
                    id.clone(),
                    format!("service {} capacity must be > 0", s.service_id),
                ));
            }
            if !seen.insert(&s.service_id) {
                return Err(ModelError::InvalidCloud(
                    id.clone(),
                    format!("duplicate service {}", s.service_id),
                ));
            }
        }
        Ok(())
    }

    pub fn service(&self, id: &ServiceId) -> Option<&TestingService> {
        self.services.iter().find(|s| &s.service_id == id)
    }

    pub(crate) fn service_mut(&mut self, id: &ServiceId) -> Option<&mut TestingService> {
        self.services.iter_mut().find(|s| &s.service_id == id)
    }

    pub fn free_services(&self) -> impl Iterator<Item = &TestingService> {
        self.services
            .iter()
            .filter(|s| s.state == ServiceState::Free)
    }

    pub fn has_free_service(&self) -> bool {
        self.free_services().next().is_some()
    }

    pub fn is_full(&self) -> bool {
        self.services.len() >= self.max_services
    }
}

/// One cloud inside a product allocation, with the services it brought along.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudLease {
    pub cloud_id: CloudId,
    pub technique_id: TechniqueId,
    pub services: Vec<ServiceId>,
}

/// The per-product allocation: manager plus leased clouds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductAllocation {
    pub product_id: ProductId,
    pub manager_id: ManagerId,
    pub clouds: Vec<CloudLease>,
}

impl ProductAllocation {
    /// Number of clouds formed for the product.
    pub fn cloud_count(&self) -> usize {
        self.clouds.len()
    }

    pub fn cloud_ids(&self) -> impl Iterator<Item = &CloudId> {
        self.clouds.iter().map(|c| &c.cloud_id)
    }

    pub fn service_ids(&self) -> impl Iterator<Item = &ServiceId> {
        self.clouds.iter().flat_map(|c| c.services.iter())
    }

    pub fn contains_cloud(&self, id: &CloudId) -> bool {
        self.clouds.iter().any(|c| &c.cloud_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerDescriptor {
    pub manager_id: ManagerId,
    pub product_id: ProductId,
}

/// All clouds and managers known to the framework plus the active allocations.
///
/// Mutated only through the allocation API, which keeps the disjointness
/// invariant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub(crate) managers: BTreeMap<ManagerId, ManagerDescriptor>,
    pub(crate) clouds: BTreeMap<CloudId, TestingCloud>,
    pub(crate) active_allocations: BTreeMap<ProductId, ProductAllocation>,
    /// Sum of pending task durations per cloud.
    pub(crate) pending_load: BTreeMap<CloudId, Tick>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_clouds(clouds: impl IntoIterator<Item = TestingCloud>) -> Result<Self, ModelError> {
        let mut registry = Self::new();
        for cloud in clouds {
            registry.add_cloud(cloud)?;
        }
        Ok(registry)
    }

    pub fn add_cloud(&mut self, cloud: TestingCloud) -> Result<(), ModelError> {
        cloud.check()?;
        if self.clouds.contains_key(&cloud.cloud_id) {
            return Err(ModelError::DuplicateCloud(cloud.cloud_id));
        }
        for s in &cloud.services {
            if self.find_service(&s.service_id).is_some() {
                return Err(ModelError::DuplicateService(s.service_id.clone()));
            }
            if s.state != ServiceState::Free {
                return Err(ModelError::InvalidCloud(
                    cloud.cloud_id.clone(),
                    format!("service {} must start Free", s.service_id),
                ));
            }
        }
        self.pending_load.insert(cloud.cloud_id.clone(), 0);
        self.clouds.insert(cloud.cloud_id.clone(), cloud);
        Ok(())
    }

    pub fn register_manager(&mut self, descriptor: ManagerDescriptor) {
        self.managers
            .insert(descriptor.manager_id.clone(), descriptor);
    }

    pub fn remove_manager(&mut self, id: &ManagerId) {
        self.managers.remove(id);
    }

    pub fn managers(&self) -> impl Iterator<Item = &ManagerDescriptor> {
        self.managers.values()
    }

    pub fn clouds(&self) -> impl Iterator<Item = &TestingCloud> {
        self.clouds.values()
    }

    pub fn cloud(&self, id: &CloudId) -> Option<&TestingCloud> {
        self.clouds.get(id)
    }

    pub fn allocation(&self, product: &ProductId) -> Option<&ProductAllocation> {
        self.active_allocations.get(product)
    }

    pub fn active_allocations(&self) -> impl Iterator<Item = &ProductAllocation> {
        self.active_allocations.values()
    }

    /// Number of products currently holding a lease.
    pub fn active_products(&self) -> usize {
        self.active_allocations.len()
    }

    pub fn pending_load(&self, cloud: &CloudId) -> Tick {
        self.pending_load.get(cloud).copied().unwrap_or(0)
    }

    pub fn set_pending_load(&mut self, cloud: &CloudId, load: Tick) {
        if self.clouds.contains_key(cloud) {
            self.pending_load.insert(cloud.clone(), load);
        }
    }

    pub fn find_service(&self, id: &ServiceId) -> Option<(&TestingCloud, &TestingService)> {
        self.clouds
            .values()
            .find_map(|c| c.service(id).map(|s| (c, s)))
    }

    /// Product holding the cloud, if any.
    pub fn lease_holder(&self, cloud: &CloudId) -> Option<&ProductId> {
        self.active_allocations
            .values()
            .find(|a| a.contains_cloud(cloud))
            .map(|a| &a.product_id)
    }

    /// JSON snapshot used for debugging and byte comparisons.
    pub fn snapshot(&self) -> String {
        serde_json::to_string(self).expect("registry serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid cloud {0}: {1}")]
    InvalidCloud(CloudId, String),
    #[error("duplicate cloud id {0}")]
    DuplicateCloud(CloudId),
    #[error("duplicate service id {0}")]
    DuplicateService(ServiceId),
}

/// A request checked against the technique catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidatedRequest {
    pub request: ConsumerRequest,
    /// Resolved specs, in the request's technique order.
    pub techniques: Vec<TechniqueSpec>,
}

impl ValidatedRequest {
    pub fn product(&self) -> &ProductSpec {
        &self.request.product
    }

    pub fn product_id(&self) -> &ProductId {
        &self.request.product.product_id
    }

    pub fn technique(&self, id: &TechniqueId) -> Option<&TechniqueSpec> {
        self.techniques.iter().find(|t| &t.technique_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("technique catalog is empty")]
    EmptyCatalog,
    #[error("unknown technique {0}")]
    UnknownTechnique(TechniqueId),
    #[error("invalid field {0}")]
    InvalidField(String),
    #[error("product has no modules")]
    EmptyProduct,
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

pub fn validate_technique(spec: &TechniqueSpec) -> Result<(), RequestError> {
    let field = |name: &str| {
        Err(RequestError::InvalidField(format!(
            "{}.{}",
            spec.technique_id, name
        )))
    };
    if spec.technique_id.as_str().is_empty() {
        return Err(RequestError::InvalidField("technique_id".into()));
    }
    if !positive(spec.test_case_density) {
        return field("test_case_density");
    }
    if spec.avg_case_time == 0 {
        return field("avg_case_time");
    }
    if !positive(spec.avg_case_size) {
        return field("avg_case_size");
    }
    Ok(())
}

pub fn validate_product(product: &ProductSpec) -> Result<(), RequestError> {
    if product.product_id.as_str().is_empty() {
        return Err(RequestError::InvalidField("product_id".into()));
    }
    if product.modules.is_empty() {
        return Err(RequestError::EmptyProduct);
    }
    let mut seen = BTreeSet::new();
    for m in &product.modules {
        if m.module_id.as_str().is_empty() || !seen.insert(&m.module_id) {
            return Err(RequestError::InvalidField(format!(
                "modules.{}",
                m.module_id
            )));
        }
        if !positive(m.size_kloc) {
            return Err(RequestError::InvalidField(format!(
                "modules.{}.size_kloc",
                m.module_id
            )));
        }
    }
    if !(product.defect_density_estimate >= 0.0 && product.defect_density_estimate.is_finite()) {
        return Err(RequestError::InvalidField("defect_density_estimate".into()));
    }
    Ok(())
}

/// Service Reception: check a consumer request and resolve its techniques.
///
/// Rejects rather than repairs. Total over all inputs.
pub fn validate_request(
    request: &ConsumerRequest,
    catalog: &[TechniqueSpec],
) -> Result<ValidatedRequest, RequestError> {
    if catalog.is_empty() {
        return Err(RequestError::EmptyCatalog);
    }
    if request.deadline == 0 {
        return Err(RequestError::InvalidField("deadline".into()));
    }
    validate_product(&request.product)?;
    if request.techniques.is_empty() {
        return Err(RequestError::InvalidField("techniques".into()));
    }
    let mut seen = BTreeSet::new();
    let mut resolved = Vec::with_capacity(request.techniques.len());
    for t in &request.techniques {
        if !seen.insert(t) {
            return Err(RequestError::InvalidField(format!("techniques.{t}")));
        }
        let spec = catalog
            .iter()
            .find(|s| &s.technique_id == t)
            .ok_or_else(|| RequestError::UnknownTechnique(t.clone()))?;
        validate_technique(spec)?;
        resolved.push(spec.clone());
    }
    Ok(ValidatedRequest {
        request: request.clone(),
        techniques: resolved,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn catalog() -> Vec<TechniqueSpec> {
        vec![technique("unit", 10.0, 3)]
    }

    #[test]
    fn resolves_known_technique() {
        let req = request("P1", &[2.0], 100, &["unit"]);
        let v = validate_request(&req, &catalog()).unwrap();
        assert_eq!(v.techniques, catalog());
        assert_eq!(v.request, req);
    }

    #[test]
    fn unknown_technique() {
        let req = request("P1", &[2.0], 100, &["mutation"]);
        assert_eq!(
            validate_request(&req, &catalog()),
            Err(RequestError::UnknownTechnique("mutation".into()))
        );
    }

    #[test]
    fn zero_deadline() {
        let req = request("P1", &[2.0], 0, &["unit"]);
        assert_eq!(
            validate_request(&req, &catalog()),
            Err(RequestError::InvalidField("deadline".into()))
        );
    }

    #[test]
    fn empty_product_and_bad_sizes() {
        let req = request("P1", &[], 10, &["unit"]);
        assert_eq!(
            validate_request(&req, &catalog()),
            Err(RequestError::EmptyProduct)
        );
        let req = request("P1", &[1.0, 0.0], 10, &["unit"]);
        assert_eq!(
            validate_request(&req, &catalog()),
            Err(RequestError::InvalidField("modules.m2.size_kloc".into()))
        );
        let req = request("P1", &[f64::NAN], 10, &["unit"]);
        assert!(validate_request(&req, &catalog()).is_err());
    }

    #[test]
    fn duplicate_and_empty_techniques() {
        let req = request("P1", &[1.0], 10, &["unit", "unit"]);
        assert_eq!(
            validate_request(&req, &catalog()),
            Err(RequestError::InvalidField("techniques.unit".into()))
        );
        let req = request("P1", &[1.0], 10, &[]);
        assert_eq!(
            validate_request(&req, &catalog()),
            Err(RequestError::InvalidField("techniques".into()))
        );
        assert_eq!(validate_request(&req, &[]), Err(RequestError::EmptyCatalog));
    }

    #[test]
    fn state_machine_edges() {
        let p = ServiceState::Leased("P1".into());
        assert!(ServiceState::Free.can_transition_to(&p));
        assert!(p.can_transition_to(&ServiceState::Free));
        assert!(p.can_transition_to(&ServiceState::Failed));
        assert!(ServiceState::Failed.can_transition_to(&ServiceState::Free));
        assert!(!ServiceState::Failed.can_transition_to(&p));
        assert!(!p.can_transition_to(&ServiceState::Leased("P2".into())));
    }

    #[test]
    fn cloud_invariants() {
        assert!(TestingCloud::new("C1", "unit", 1, vec![]).is_err());
        assert!(TestingCloud::new(
            "C1",
            "unit",
            0,
            vec![TestingService::new("s1", "unit", 1.0)]
        )
        .is_err());
        assert!(TestingCloud::new(
            "C1",
            "unit",
            2,
            vec![TestingService::new("s1", "perf", 1.0)]
        )
        .is_err());
        assert!(TestingCloud::new(
            "C1",
            "unit",
            2,
            vec![TestingService::new("s1", "unit", 0.0)]
        )
        .is_err());
    }

    #[test]
    fn allocation_symbols_round_trip() {
        let mut registry = Registry::with_clouds([
            cloud("C1", "unit", 8, &["s1", "s2"]),
            cloud("C2", "perf", 2, &["s3"]),
        ])
        .unwrap();
        for s in &mut registry
            .clouds
            .get_mut(&CloudId::from("C1"))
            .unwrap()
            .services
        {
            s.state = ServiceState::Leased("P1".into());
        }
        registry.register_manager(ManagerDescriptor {
            manager_id: "sm-P1".into(),
            product_id: "P1".into(),
        });
        registry.active_allocations.insert(
            "P1".into(),
            ProductAllocation {
                product_id: "P1".into(),
                manager_id: "sm-P1".into(),
                clouds: vec![CloudLease {
                    cloud_id: "C1".into(),
                    technique_id: "unit".into(),
                    services: vec!["s1".into(), "s2".into()],
                }],
            },
        );
        let json = registry.snapshot();
        let back: Registry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, registry);
        assert_eq!(back.active_products(), 1);
        assert_eq!(back.allocation(&"P1".into()).unwrap().cloud_count(), 1);
        assert_eq!(back.cloud(&"C1".into()).unwrap().max_services, 8);
    }
}
