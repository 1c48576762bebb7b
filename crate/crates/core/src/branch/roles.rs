use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentRole {
    CustomerService,
    FinancialAdvisor,
    SalesAssociate,
}

impl AgentRole {
    pub const ALL: [AgentRole; 3] = [
        AgentRole::CustomerService,
        AgentRole::FinancialAdvisor,
        AgentRole::SalesAssociate,
    ];

    /// Service needs a station staffed in this role can handle.
    pub fn capabilities(self) -> &'static [ServiceNeed] {
        match self {
            AgentRole::CustomerService => {
                &[ServiceNeed::GeneralInquiry, ServiceNeed::InformationLookup]
            }
            AgentRole::FinancialAdvisor => &[
                ServiceNeed::GeneralInquiry,
                ServiceNeed::TransactionRequest,
                ServiceNeed::InformationLookup,
            ],
            AgentRole::SalesAssociate => {
                &[ServiceNeed::GeneralInquiry, ServiceNeed::InformationLookup]
            }
        }
    }

    pub fn can_serve(self, need: ServiceNeed) -> bool {
        self.capabilities().contains(&need)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::CustomerService => "CustomerService",
            AgentRole::FinancialAdvisor => "FinancialAdvisor",
            AgentRole::SalesAssociate => "SalesAssociate",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ServiceNeed {
    GeneralInquiry,
    TransactionRequest,
    InformationLookup,
}

impl ServiceNeed {
    pub const ALL: [ServiceNeed; 3] = [
        ServiceNeed::GeneralInquiry,
        ServiceNeed::TransactionRequest,
        ServiceNeed::InformationLookup,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entitlement {
    pub resource: String,
    pub granted_by_role: AgentRole,
}

/// Resources each role may touch. Anything not listed is denied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoleMatrix(BTreeMap<AgentRole, BTreeSet<String>>);

impl Default for RoleMatrix {
    fn default() -> Self {
        let base = ["profile.name", "queue.position", "faq.read"];
        let with = |extra: &[&str]| -> BTreeSet<String> {
            base.iter().chain(extra).map(|s| s.to_string()).collect()
        };
        RoleMatrix(BTreeMap::from([
            (AgentRole::CustomerService, with(&[])),
            (
                AgentRole::FinancialAdvisor,
                with(&["accounts.balance", "accounts.history"]),
            ),
            (
                AgentRole::SalesAssociate,
                with(&["catalog.read", "offers.create"]),
            ),
        ]))
    }
}

impl RoleMatrix {
    pub fn new(rows: BTreeMap<AgentRole, BTreeSet<String>>) -> Result<Self, String> {
        match AgentRole::ALL.iter().find(|r| !rows.contains_key(r)) {
            Some(missing) => Err(format!("role matrix has no row for {missing}")),
            None => Ok(RoleMatrix(rows)),
        }
    }

    pub fn row(&self, role: AgentRole) -> &BTreeSet<String> {
        static EMPTY: BTreeSet<String> = BTreeSet::new();
        self.0.get(&role).unwrap_or(&EMPTY)
    }

    pub fn allows(&self, role: AgentRole, resource: &str) -> bool {
        self.row(role).contains(resource)
    }

    pub fn entitlements(&self, role: AgentRole) -> BTreeSet<Entitlement> {
        self.row(role)
            .iter()
            .map(|resource| Entitlement {
                resource: resource.clone(),
                granted_by_role: role,
            })
            .collect()
    }

    pub fn resources(&self) -> BTreeSet<&str> {
        self.0.values().flatten().map(String::as_str).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        RoleMatrix::new(self.0.clone()).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rows() {
        let m = RoleMatrix::default();
        assert_eq!(m.row(AgentRole::CustomerService).len(), 3);
        assert!(m.allows(AgentRole::FinancialAdvisor, "accounts.balance"));
        assert!(!m.allows(AgentRole::CustomerService, "accounts.balance"));
        assert!(!m.allows(AgentRole::FinancialAdvisor, "accounts.transact"));
        assert!(m.allows(AgentRole::SalesAssociate, "offers.create"));
        assert!(m
            .row(AgentRole::CustomerService)
            .is_subset(m.row(AgentRole::SalesAssociate)));
    }

    #[test]
    fn matrix_needs_every_role() {
        let rows = BTreeMap::from([(AgentRole::CustomerService, BTreeSet::new())]);
        assert!(RoleMatrix::new(rows).is_err());
    }

    #[test]
    fn role_names_parse() {
        for r in AgentRole::ALL {
            assert_eq!(r.as_str().parse::<AgentRole>(), Ok(r));
        }
        assert!("Janitor".parse::<AgentRole>().is_err());
    }

    #[test]
    fn only_financial_advisor_takes_transactions() {
        let capable: Vec<_> = AgentRole::ALL
            .into_iter()
            .filter(|r| r.can_serve(ServiceNeed::TransactionRequest))
            .collect();
        assert_eq!(capable, vec![AgentRole::FinancialAdvisor]);
    }
}
