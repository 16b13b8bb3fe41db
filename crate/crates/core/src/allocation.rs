//! Cloud formation for a Service Manager: service registration, single-round
//! propose/accept negotiation, exclusive whole-cloud leases and release.
//!
//! Every mutating call validates first and mutates second, so a failed call
//! leaves the registry untouched. The disjointness invariant (no cloud or
//! service in two active allocations) holds after every public operation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CloudId, CloudLease, ManagerDescriptor, ManagerId, ProductAllocation, ProductId, Registry,
    ServiceId, ServiceState, TechniqueId, TestingService, Tick, ValidatedRequest,
};

/// A candidate cloud for one requested technique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudProposal {
    pub product_id: ProductId,
    pub technique_id: TechniqueId,
    pub candidate_cloud_id: CloudId,
    pub current_load: Tick,
    /// Services that were Free when the proposal was made.
    pub free_services: Vec<ServiceId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub allocation: ProductAllocation,
    pub granted_at: Tick,
    pub released: bool,
}

impl Lease {
    pub fn product_id(&self) -> &ProductId {
        &self.allocation.product_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocationError {
    #[error("unknown cloud {0}")]
    UnknownCloud(CloudId),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("cloud {0} is at max_services")]
    CloudFull(CloudId),
    #[error("service technique {service} does not match cloud technique {cloud}")]
    TechniqueMismatch {
        service: TechniqueId,
        cloud: TechniqueId,
    },
    #[error("duplicate service id {0}")]
    DuplicateServiceId(ServiceId),
    #[error("no cloud serves technique {0}")]
    TechniqueUnavailable(TechniqueId),
    #[error("no cloud for technique {0} has a free service")]
    NoCapacity(TechniqueId),
    #[error("cloud {cloud} is already leased to {holder}")]
    AllocationConflict { cloud: CloudId, holder: ProductId },
    #[error("service {service} in cloud {cloud} failed after the proposal")]
    StaleProposal { cloud: CloudId, service: ServiceId },
    #[error("proposal set is invalid: {0}")]
    InvalidProposals(String),
    #[error("lease for {0} already released")]
    AlreadyReleased(ProductId),
    #[error("illegal state change for {service}: {from:?} -> {to:?}")]
    IllegalTransition {
        service: ServiceId,
        from: ServiceState,
        to: ServiceState,
    },
}

impl Registry {
    /// Add a service to a cloud. The service always enters Free.
    pub fn register_service(
        &mut self,
        cloud_id: &CloudId,
        descriptor: TestingService,
    ) -> Result<(), AllocationError> {
        let cloud = self
            .clouds
            .get(cloud_id)
            .ok_or_else(|| AllocationError::UnknownCloud(cloud_id.clone()))?;
        if self.find_service(&descriptor.service_id).is_some() {
            return Err(AllocationError::DuplicateServiceId(descriptor.service_id));
        }
        if descriptor.technique_id != cloud.technique_id {
            return Err(AllocationError::TechniqueMismatch {
                service: descriptor.technique_id,
                cloud: cloud.technique_id.clone(),
            });
        }
        if cloud.is_full() {
            return Err(AllocationError::CloudFull(cloud_id.clone()));
        }
        if !(descriptor.capacity > 0.0 && descriptor.capacity.is_finite()) {
            return Err(AllocationError::InvalidProposals(format!(
                "service {} capacity must be > 0",
                descriptor.service_id
            )));
        }
        let cloud = self.clouds.get_mut(cloud_id).expect("checked above");
        cloud.services.push(TestingService {
            state: ServiceState::Free,
            ..descriptor
        });
        Ok(())
    }

    /// One proposal per requested technique: the matching cloud with a Free
    /// service and the smallest pending load, ties to the smallest cloud id.
    pub fn form_clouds(
        &self,
        request: &ValidatedRequest,
    ) -> Result<Vec<CloudProposal>, AllocationError> {
        request
            .request
            .techniques
            .iter()
            .map(|technique| {
                let mut matching = self
                    .clouds
                    .values()
                    .filter(|c| &c.technique_id == technique)
                    .peekable();
                if matching.peek().is_none() {
                    return Err(AllocationError::TechniqueUnavailable(technique.clone()));
                }
                // BTreeMap iteration is already in cloud id order, so min_by_key keeps the first on ties.
                let best = matching
                    .filter(|c| c.has_free_service())
                    .min_by_key(|c| self.pending_load(&c.cloud_id))
                    .ok_or_else(|| AllocationError::NoCapacity(technique.clone()))?;
                Ok(CloudProposal {
                    product_id: request.product_id().clone(),
                    technique_id: technique.clone(),
                    candidate_cloud_id: best.cloud_id.clone(),
                    current_load: self.pending_load(&best.cloud_id),
                    free_services: best.free_services().map(|s| s.service_id.clone()).collect(),
                })
            })
            .collect()
    }

    /// Accept a full proposal set: lease every named cloud to the product or
    /// none of them.
    pub fn allocate(
        &mut self,
        manager_id: &ManagerId,
        proposals: &[CloudProposal],
        now: Tick,
    ) -> Result<Lease, AllocationError> {
        let product = match proposals.first() {
            Some(p) => p.product_id.clone(),
            None => {
                return Err(AllocationError::InvalidProposals(
                    "empty proposal set".into(),
                ))
            }
        };
        if let Some(existing) = self.active_allocations.get(&product) {
            let cloud = existing.clouds[0].cloud_id.clone();
            return Err(AllocationError::AllocationConflict {
                cloud,
                holder: product,
            });
        }
        let mut techniques = BTreeSet::new();
        let mut clouds = BTreeSet::new();
        for p in proposals {
            if p.product_id != product {
                return Err(AllocationError::InvalidProposals(
                    "proposals span products".into(),
                ));
            }
            if !techniques.insert(&p.technique_id) || !clouds.insert(&p.candidate_cloud_id) {
                return Err(AllocationError::InvalidProposals(
                    "duplicate technique or cloud".into(),
                ));
            }
        }
        for p in proposals {
            let cloud = self
                .clouds
                .get(&p.candidate_cloud_id)
                .ok_or_else(|| AllocationError::UnknownCloud(p.candidate_cloud_id.clone()))?;
            if cloud.technique_id != p.technique_id {
                return Err(AllocationError::TechniqueMismatch {
                    service: p.technique_id.clone(),
                    cloud: cloud.technique_id.clone(),
                });
            }
            if let Some(holder) = self.lease_holder(&cloud.cloud_id) {
                return Err(AllocationError::AllocationConflict {
                    cloud: cloud.cloud_id.clone(),
                    holder: holder.clone(),
                });
            }
            if let Some(s) = cloud
                .services
                .iter()
                .find(|s| matches!(s.state, ServiceState::Leased(_)))
            {
                // Leased service outside any allocation would itself be a broken invariant.
                let ServiceState::Leased(holder) = &s.state else {
                    unreachable!()
                };
                return Err(AllocationError::AllocationConflict {
                    cloud: cloud.cloud_id.clone(),
                    holder: holder.clone(),
                });
            }
            for id in &p.free_services {
                match cloud.service(id) {
                    Some(s) if s.state == ServiceState::Free => {}
                    _ => {
                        return Err(AllocationError::StaleProposal {
                            cloud: cloud.cloud_id.clone(),
                            service: id.clone(),
                        })
                    }
                }
            }
            if !cloud.has_free_service() {
                return Err(AllocationError::StaleProposal {
                    cloud: cloud.cloud_id.clone(),
                    service: cloud.services[0].service_id.clone(),
                });
            }
        }

        let mut leases = Vec::with_capacity(proposals.len());
        for p in proposals {
            let cloud = self
                .clouds
                .get_mut(&p.candidate_cloud_id)
                .expect("validated");
            let mut members = Vec::new();
            for s in cloud
                .services
                .iter_mut()
                .filter(|s| s.state == ServiceState::Free)
            {
                s.state = ServiceState::Leased(product.clone());
                members.push(s.service_id.clone());
            }
            leases.push(CloudLease {
                cloud_id: cloud.cloud_id.clone(),
                technique_id: cloud.technique_id.clone(),
                services: members,
            });
        }
        let allocation = ProductAllocation {
            product_id: product.clone(),
            manager_id: manager_id.clone(),
            clouds: leases,
        };
        self.register_manager(ManagerDescriptor {
            manager_id: manager_id.clone(),
            product_id: product.clone(),
        });
        self.active_allocations.insert(product, allocation.clone());
        Ok(Lease {
            allocation,
            granted_at: now,
            released: false,
        })
    }

    /// End a lease. Leased members go back to Free; failed members stay
    /// Failed until they recover.
    pub fn release(&mut self, lease: &mut Lease) -> Result<(), AllocationError> {
        let product = lease.product_id().clone();
        if lease.released {
            return Err(AllocationError::AlreadyReleased(product));
        }
        let allocation = self
            .active_allocations
            .remove(&product)
            .ok_or_else(|| AllocationError::AlreadyReleased(product.clone()))?;
        for cl in &allocation.clouds {
            if let Some(cloud) = self.clouds.get_mut(&cl.cloud_id) {
                for s in cloud.services.iter_mut() {
                    if s.state == ServiceState::Leased(product.clone()) {
                        s.state = ServiceState::Free;
                    }
                }
            }
            self.pending_load.insert(cl.cloud_id.clone(), 0);
        }
        self.managers.retain(|_, m| m.product_id != product);
        lease.released = true;
        lease.allocation = allocation;
        Ok(())
    }

    /// True iff no cloud and no service belongs to two active allocations.
    pub fn verify_disjointness(&self) -> bool {
        let mut clouds = BTreeSet::new();
        let mut services = BTreeSet::new();
        for a in self.active_allocations.values() {
            // Within one allocation the sets are duplicate-free, so any repeat is a cross-product share.
            for c in a.cloud_ids() {
                if !clouds.insert(c) {
                    return false;
                }
            }
            for s in a.service_ids() {
                if !services.insert(s) {
                    return false;
                }
            }
        }
        true
    }

    /// Disjointness plus agreement between service states and allocation
    /// membership. Used by tests and the simulator's self-checks.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.verify_disjointness() {
            return Err("allocations overlap".into());
        }
        for a in self.active_allocations.values() {
            if a.clouds.is_empty() {
                return Err(format!("allocation {} has no clouds", a.product_id));
            }
            for cl in &a.clouds {
                let cloud = self.clouds.get(&cl.cloud_id).ok_or_else(|| {
                    format!(
                        "allocation {} names unknown cloud {}",
                        a.product_id, cl.cloud_id
                    )
                })?;
                for id in &cl.services {
                    match cloud.service(id).map(|s| &s.state) {
                        Some(ServiceState::Leased(p)) if p == &a.product_id => {}
                        Some(ServiceState::Failed) => {}
                        other => {
                            return Err(format!(
                                "member {id} of {} is in state {other:?}",
                                a.product_id
                            ))
                        }
                    }
                }
            }
        }
        for cloud in self.clouds.values() {
            for s in &cloud.services {
                if let ServiceState::Leased(p) = &s.state {
                    let member = self
                        .active_allocations
                        .get(p)
                        .is_some_and(|a| a.service_ids().any(|id| id == &s.service_id));
                    if !member {
                        return Err(format!(
                            "{} leased to {p} outside its allocation",
                            s.service_id
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Mark a service Failed. Returns the product whose allocation holds it.
    pub fn fail_service(&mut self, id: &ServiceId) -> Result<Option<ProductId>, AllocationError> {
        let holder = self.holder_of_service(id);
        let service = self.service_mut(id)?;
        service.state = ServiceState::Failed;
        Ok(holder)
    }

    /// Bring a failed service back. If its cloud is leased, the service
    /// rejoins that lease immediately.
    pub fn recover_service(
        &mut self,
        id: &ServiceId,
    ) -> Result<Option<ProductId>, AllocationError> {
        let service = self.service_mut(id)?;
        if service.state != ServiceState::Failed {
            return Err(AllocationError::IllegalTransition {
                service: id.clone(),
                from: service.state.clone(),
                to: ServiceState::Free,
            });
        }
        service.state = ServiceState::Free;
        let (cloud_id, _) = self.locate(id)?;
        match self.lease_holder(&cloud_id).cloned() {
            Some(product) => {
                self.attach_service(&product, id)?;
                Ok(Some(product))
            }
            None => Ok(None),
        }
    }

    /// Register a new unit-capacity clone in a leased cloud and add it to the
    /// holder's allocation.
    pub fn spawn_clone(
        &mut self,
        cloud_id: &CloudId,
        product: &ProductId,
        capacity: f64,
    ) -> Result<ServiceId, AllocationError> {
        let cloud = self
            .clouds
            .get(cloud_id)
            .ok_or_else(|| AllocationError::UnknownCloud(cloud_id.clone()))?;
        match self.lease_holder(cloud_id) {
            Some(p) if p == product => {}
            Some(p) => {
                return Err(AllocationError::AllocationConflict {
                    cloud: cloud_id.clone(),
                    holder: p.clone(),
                })
            }
            None => {
                return Err(AllocationError::InvalidProposals(format!(
                    "{cloud_id} is not leased to {product}"
                )))
            }
        }
        let id = (1..)
            .map(|n| ServiceId::from(format!("{cloud_id}-clone{n}")))
            .find(|id| self.find_service(id).is_none())
            .expect("unbounded search");
        let technique = cloud.technique_id.clone();
        self.register_service(
            cloud_id,
            TestingService::new(id.clone(), technique, capacity),
        )?;
        self.attach_service(product, &id)?;
        Ok(id)
    }

    fn attach_service(
        &mut self,
        product: &ProductId,
        id: &ServiceId,
    ) -> Result<(), AllocationError> {
        let (cloud_id, _) = self.locate(id)?;
        let service = self.service_mut(id)?;
        if service.state != ServiceState::Free {
            return Err(AllocationError::IllegalTransition {
                service: id.clone(),
                from: service.state.clone(),
                to: ServiceState::Leased(product.clone()),
            });
        }
        service.state = ServiceState::Leased(product.clone());
        let allocation = self
            .active_allocations
            .get_mut(product)
            .expect("caller checked lease holder");
        let lease = allocation
            .clouds
            .iter_mut()
            .find(|c| c.cloud_id == cloud_id)
            .expect("cloud belongs to allocation");
        if !lease.services.contains(id) {
            lease.services.push(id.clone());
        }
        Ok(())
    }

    fn holder_of_service(&self, id: &ServiceId) -> Option<ProductId> {
        self.active_allocations
            .values()
            .find(|a| a.service_ids().any(|s| s == id))
            .map(|a| a.product_id.clone())
    }

    fn locate(&self, id: &ServiceId) -> Result<(CloudId, TechniqueId), AllocationError> {
        self.find_service(id)
            .map(|(c, s)| (c.cloud_id.clone(), s.technique_id.clone()))
            .ok_or_else(|| AllocationError::UnknownService(id.clone()))
    }

    fn service_mut(&mut self, id: &ServiceId) -> Result<&mut TestingService, AllocationError> {
        self.clouds
            .values_mut()
            .find_map(|c| c.service_mut(id))
            .ok_or_else(|| AllocationError::UnknownService(id.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{validate_request, TechniqueSpec};

    fn catalog() -> Vec<TechniqueSpec> {
        vec![
            technique("unit", 10.0, 3),
            technique("functional", 5.0, 4),
            technique("structural", 5.0, 2),
            technique("perf", 1.0, 10),
        ]
    }

    fn validated(product: &str, techniques: &[&str]) -> ValidatedRequest {
        validate_request(&request(product, &[1.0], 100, techniques), &catalog()).unwrap()
    }

    fn sm(product: &str) -> ManagerId {
        format!("sm-{product}").into()
    }

    fn lease(
        registry: &mut Registry,
        product: &str,
        techniques: &[&str],
    ) -> Result<Lease, AllocationError> {
        let proposals = registry.form_clouds(&validated(product, techniques))?;
        registry.allocate(&sm(product), &proposals, 0)
    }

    #[test]
    fn register_service_grows_cloud() {
        let mut r = Registry::with_clouds([cloud("C1", "unit", 8, &["s1", "s2"])]).unwrap();
        r.register_service(&"C1".into(), TestingService::new("s3", "unit", 1.0))
            .unwrap();
        let c = r.cloud(&"C1".into()).unwrap();
        assert_eq!(c.services.len(), 3);
        assert_eq!(c.services[2].state, ServiceState::Free);
    }

    #[test]
    fn register_service_errors() {
        let mut r = Registry::with_clouds([
            cloud("C1", "unit", 2, &["s1", "s2"]),
            cloud("C2", "unit", 4, &["s4"]),
        ])
        .unwrap();
        assert_eq!(
            r.register_service(&"C1".into(), TestingService::new("s3", "unit", 1.0)),
            Err(AllocationError::CloudFull("C1".into()))
        );
        assert_eq!(
            r.register_service(&"C2".into(), TestingService::new("s1", "unit", 1.0)),
            Err(AllocationError::DuplicateServiceId("s1".into()))
        );
        r.register_service(&"C2".into(), TestingService::new("s5", "unit", 1.0))
            .unwrap();
        assert_eq!(
            r.register_service(&"C2".into(), TestingService::new("s5", "unit", 1.0)),
            Err(AllocationError::DuplicateServiceId("s5".into()))
        );
        assert!(matches!(
            r.register_service(&"C2".into(), TestingService::new("s6", "perf", 1.0)),
            Err(AllocationError::TechniqueMismatch { .. })
        ));
        assert_eq!(
            r.register_service(&"C9".into(), TestingService::new("s7", "unit", 1.0)),
            Err(AllocationError::UnknownCloud("C9".into()))
        );
    }

    #[test]
    fn one_proposal_per_technique() {
        let r = Registry::with_clouds([
            cloud("F1", "functional", 2, &["f1"]),
            cloud("S1", "structural", 2, &["t1"]),
        ])
        .unwrap();
        let proposals = r
            .form_clouds(&validated("P1", &["functional", "structural"]))
            .unwrap();
        assert_eq!(proposals.len(), 2);
        assert_eq!(proposals[0].candidate_cloud_id, CloudId::from("F1"));
        assert_eq!(proposals[1].candidate_cloud_id, CloudId::from("S1"));
    }

    #[test]
    fn minimum_load_wins_then_smallest_id() {
        let mut r = Registry::with_clouds([
            cloud("C1", "unit", 2, &["a"]),
            cloud("C2", "unit", 2, &["b"]),
            cloud("C3", "unit", 2, &["c"]),
        ])
        .unwrap();
        r.set_pending_load(&"C1".into(), 5);
        r.set_pending_load(&"C2".into(), 3);
        r.set_pending_load(&"C3".into(), 3);
        let proposals = r.form_clouds(&validated("P1", &["unit"])).unwrap();
        assert_eq!(proposals[0].candidate_cloud_id, CloudId::from("C2"));
        assert_eq!(proposals[0].current_load, 3);
    }

    #[test]
    fn unavailable_and_no_capacity() {
        let mut r = Registry::with_clouds([cloud("C1", "unit", 2, &["s1"])]).unwrap();
        assert_eq!(
            r.form_clouds(&validated("P1", &["perf"])),
            Err(AllocationError::TechniqueUnavailable("perf".into()))
        );
        lease(&mut r, "P1", &["unit"]).unwrap();
        assert_eq!(
            r.form_clouds(&validated("P2", &["unit"])),
            Err(AllocationError::NoCapacity("unit".into()))
        );
    }

    #[test]
    fn second_product_conflicts() {
        let mut r = Registry::with_clouds([cloud("C1", "unit", 2, &["s1", "s2"])]).unwrap();
        let p2 = r.form_clouds(&validated("P2", &["unit"])).unwrap();
        lease(&mut r, "P1", &["unit"]).unwrap();
        assert_eq!(
            r.allocate(&sm("P2"), &p2, 1),
            Err(AllocationError::AllocationConflict {
                cloud: "C1".into(),
                holder: "P1".into()
            })
        );
        assert!(r.verify_disjointness());
    }

    #[test]
    fn allocate_leases_every_service() {
        let mut r = Registry::with_clouds([
            cloud("C1", "unit", 2, &["s1", "s2"]),
            cloud("C2", "perf", 2, &["s3"]),
        ])
        .unwrap();
        let lease = lease(&mut r, "P1", &["unit", "perf"]).unwrap();
        assert_eq!(lease.allocation.cloud_count(), 2);
        for c in r.clouds() {
            for s in &c.services {
                assert_eq!(s.state, ServiceState::Leased("P1".into()));
            }
        }
        assert_eq!(r.active_products(), 1);
        r.check_invariants().unwrap();
    }

    #[test]
    fn failed_allocate_changes_nothing() {
        let mut r = Registry::with_clouds([
            cloud("C1", "unit", 2, &["s1"]),
            cloud("C2", "perf", 2, &["s2"]),
        ])
        .unwrap();
        let p2 = r.form_clouds(&validated("P2", &["unit", "perf"])).unwrap();
        lease(&mut r, "P1", &["perf"]).unwrap();
        let before = r.snapshot();
        assert!(matches!(
            r.allocate(&sm("P2"), &p2, 1),
            Err(AllocationError::AllocationConflict { .. })
        ));
        assert_eq!(r.snapshot(), before);
        assert_eq!(
            r.cloud(&"C1".into()).unwrap().services[0].state,
            ServiceState::Free
        );
    }

    #[test]
    fn stale_proposal_after_failure() {
        let mut r = Registry::with_clouds([cloud("C1", "unit", 2, &["s1", "s2"])]).unwrap();
        let p = r.form_clouds(&validated("P1", &["unit"])).unwrap();
        r.fail_service(&"s2".into()).unwrap();
        let before = r.snapshot();
        assert_eq!(
            r.allocate(&sm("P1"), &p, 0),
            Err(AllocationError::StaleProposal {
                cloud: "C1".into(),
                service: "s2".into()
            })
        );
        assert_eq!(r.snapshot(), before);
    }

    #[test]
    fn release_restores_capacity() {
        let mut r = Registry::with_clouds([cloud("C1", "unit", 2, &["s1"])]).unwrap();
        let mut l = lease(&mut r, "P1", &["unit"]).unwrap();
        r.release(&mut l).unwrap();
        assert!(l.released);
        assert_eq!(r.active_products(), 0);
        lease(&mut r, "P2", &["unit"]).unwrap();
        assert_eq!(
            r.release(&mut l),
            Err(AllocationError::AlreadyReleased("P1".into()))
        );
    }

    #[test]
    fn release_keeps_failed_members_failed() {
        let mut r = Registry::with_clouds([cloud("C1", "unit", 2, &["s1", "s2"])]).unwrap();
        let mut l = lease(&mut r, "P1", &["unit"]).unwrap();
        assert_eq!(r.fail_service(&"s1".into()), Ok(Some("P1".into())));
        r.check_invariants().unwrap();
        r.release(&mut l).unwrap();
        let c = r.cloud(&"C1".into()).unwrap();
        assert_eq!(c.services[0].state, ServiceState::Failed);
        assert_eq!(c.services[1].state, ServiceState::Free);
        assert_eq!(r.recover_service(&"s1".into()), Ok(None));
        assert_eq!(
            r.cloud(&"C1".into()).unwrap().services[0].state,
            ServiceState::Free
        );
    }

    #[test]
    fn recovery_rejoins_active_lease() {
        let mut r = Registry::with_clouds([cloud("C1", "unit", 3, &["s1", "s2"])]).unwrap();
        r.fail_service(&"s2".into()).unwrap();
        let _l = lease(&mut r, "P1", &["unit"]).unwrap();
        assert_eq!(
            r.allocation(&"P1".into()).unwrap().clouds[0].services,
            vec![ServiceId::from("s1")]
        );
        assert_eq!(r.recover_service(&"s2".into()), Ok(Some("P1".into())));
        assert_eq!(
            r.allocation(&"P1".into()).unwrap().clouds[0].services.len(),
            2
        );
        let clone = r.spawn_clone(&"C1".into(), &"P1".into(), 1.0).unwrap();
        assert_eq!(clone, ServiceId::from("C1-clone1"));
        assert_eq!(
            r.spawn_clone(&"C1".into(), &"P1".into(), 1.0),
            Err(AllocationError::CloudFull("C1".into()))
        );
        r.check_invariants().unwrap();
        assert!(matches!(
            r.recover_service(&"s1".into()),
            Err(AllocationError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn disjointness_examples() {
        let mut r = Registry::new();
        assert!(r.verify_disjointness());
        r = Registry::with_clouds([
            cloud("C1", "unit", 2, &["s1"]),
            cloud("C2", "unit", 2, &["s2"]),
        ])
        .unwrap();
        lease(&mut r, "P1", &["unit"]).unwrap();
        lease(&mut r, "P2", &["unit"]).unwrap();
        assert!(r.verify_disjointness());
        // Hand-corrupted state: both products claim C1.
        let mut bad = r.allocation(&"P1".into()).unwrap().clone();
        bad.product_id = "P2".into();
        r.active_allocations.insert("P2".into(), bad);
        assert!(!r.verify_disjointness());
    }

    #[test]
    fn form_clouds_is_pure() {
        let r = Registry::with_clouds([
            cloud("C2", "unit", 2, &["b"]),
            cloud("C1", "unit", 2, &["a"]),
        ])
        .unwrap();
        let req = validated("P1", &["unit"]);
        assert_eq!(r.form_clouds(&req), r.form_clouds(&req));
        assert_eq!(
            r.form_clouds(&req).unwrap()[0].candidate_cloud_id,
            CloudId::from("C1")
        );
    }
}
