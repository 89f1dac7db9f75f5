//! The coordinator API as seen by agents: either the in-process service or
//! a remote one over HTTP.

use std::sync::Arc;

use async_trait::async_trait;
use eaas_core::{DeviceProfile, EnergyAmount, EnergyListing, Role};
use reqwest::{Method, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CoordError, ErrorCode};
use crate::model::{
    DeviceIdBody, LossReport, NewListing, NewTransaction, PartyReport, StateBody, TransactionIdBody,
    TransactionRecord, TxState,
};
use crate::service::Coordinator;

#[async_trait]
pub trait CoordinatorApi: Send + Sync {
    async fn register_device(&self, profile: DeviceProfile) -> Result<String, CoordError>;
    async fn post_listing(
        &self,
        microcell_id: &str,
        device_id: &str,
        role: Role,
        amount: EnergyAmount,
    ) -> Result<EnergyListing, CoordError>;
    async fn withdraw_listing(&self, listing_id: &str) -> Result<EnergyListing, CoordError>;
    async fn list_open(&self, microcell_id: &str, role: Option<Role>) -> Result<Vec<EnergyListing>, CoordError>;
    async fn create_transaction(&self, req: NewTransaction) -> Result<String, CoordError>;
    async fn submit_report(&self, transaction_id: &str, report: PartyReport) -> Result<TxState, CoordError>;
    async fn get_transaction(&self, transaction_id: &str) -> Result<TransactionRecord, CoordError>;
    async fn loss_report(&self, transaction_id: &str, bucket_s: f64) -> Result<LossReport, CoordError>;
}

#[async_trait]
impl CoordinatorApi for Arc<Coordinator> {
    async fn register_device(&self, profile: DeviceProfile) -> Result<String, CoordError> {
        Coordinator::register_device(self, profile)
    }

    async fn post_listing(
        &self,
        microcell_id: &str,
        device_id: &str,
        role: Role,
        amount: EnergyAmount,
    ) -> Result<EnergyListing, CoordError> {
        Coordinator::post_listing(
            self,
            microcell_id,
            NewListing {
                device_id: device_id.into(),
                role,
                amount_percent: amount,
            },
        )
    }

    async fn withdraw_listing(&self, listing_id: &str) -> Result<EnergyListing, CoordError> {
        Coordinator::withdraw_listing(self, listing_id)
    }

    async fn list_open(&self, microcell_id: &str, role: Option<Role>) -> Result<Vec<EnergyListing>, CoordError> {
        Ok(Coordinator::list_open(self, microcell_id, role))
    }

    async fn create_transaction(&self, req: NewTransaction) -> Result<String, CoordError> {
        Coordinator::create_transaction(self, req)
    }

    async fn submit_report(&self, transaction_id: &str, report: PartyReport) -> Result<TxState, CoordError> {
        Coordinator::submit_report(self, transaction_id, report)
    }

    async fn get_transaction(&self, transaction_id: &str) -> Result<TransactionRecord, CoordError> {
        Coordinator::get_transaction(self, transaction_id)
    }

    async fn loss_report(&self, transaction_id: &str, bucket_s: f64) -> Result<LossReport, CoordError> {
        Coordinator::loss_report(self, transaction_id, bucket_s)
    }
}

#[derive(Debug, Clone)]
pub struct HttpCoordinator {
    base: String,
    http: reqwest::Client,
}

impl HttpCoordinator {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn req(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base))
    }

    async fn call_raw(&self, rb: RequestBuilder) -> Result<Vec<u8>, CoordError> {
        let resp = rb.send().await.map_err(|e| {
            CoordError::new(ErrorCode::Unavailable, "coordinator unreachable").with_detail(e.to_string())
        })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| {
            CoordError::new(ErrorCode::Unavailable, "coordinator response interrupted").with_detail(e.to_string())
        })?;
        if status.is_success() {
            Ok(bytes.to_vec())
        } else {
            Err(serde_json::from_slice::<CoordError>(&bytes).unwrap_or_else(|_| {
                CoordError::internal(format!("HTTP {status}"))
                    .with_detail(String::from_utf8_lossy(&bytes).into_owned())
            }))
        }
    }

    async fn call<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T, CoordError> {
        let bytes = self.call_raw(rb).await?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CoordError::internal("unexpected response body").with_detail(e.to_string()))
    }

    async fn send<B: Serialize + Sync, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: &B,
    ) -> Result<T, CoordError> {
        self.call(self.req(method, path).json(body)).await
    }

    /// Raw JSON of a transaction, exactly as served.
    pub async fn get_transaction_text(&self, transaction_id: &str) -> Result<String, CoordError> {
        let bytes = self
            .call_raw(self.req(Method::GET, &format!("/v1/transactions/{transaction_id}")))
            .await?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

#[async_trait]
impl CoordinatorApi for HttpCoordinator {
    async fn register_device(&self, profile: DeviceProfile) -> Result<String, CoordError> {
        let body: DeviceIdBody = self.send(Method::POST, "/v1/devices", &profile).await?;
        Ok(body.device_id)
    }

    async fn post_listing(
        &self,
        microcell_id: &str,
        device_id: &str,
        role: Role,
        amount: EnergyAmount,
    ) -> Result<EnergyListing, CoordError> {
        let req = NewListing {
            device_id: device_id.into(),
            role,
            amount_percent: amount,
        };
        self.send(Method::POST, &format!("/v1/microcells/{microcell_id}/listings"), &req)
            .await
    }

    async fn withdraw_listing(&self, listing_id: &str) -> Result<EnergyListing, CoordError> {
        self.call(self.req(Method::DELETE, &format!("/v1/listings/{listing_id}")))
            .await
    }

    async fn list_open(&self, microcell_id: &str, role: Option<Role>) -> Result<Vec<EnergyListing>, CoordError> {
        let query = role.map(|r| format!("?role={r}")).unwrap_or_default();
        self.call(self.req(Method::GET, &format!("/v1/microcells/{microcell_id}/listings{query}")))
            .await
    }

    async fn create_transaction(&self, req: NewTransaction) -> Result<String, CoordError> {
        let body: TransactionIdBody = self.send(Method::POST, "/v1/transactions", &req).await?;
        Ok(body.transaction_id)
    }

    async fn submit_report(&self, transaction_id: &str, report: PartyReport) -> Result<TxState, CoordError> {
        let body: StateBody = self
            .send(Method::PUT, &format!("/v1/transactions/{transaction_id}/reports"), &report)
            .await?;
        Ok(body.state)
    }

    async fn get_transaction(&self, transaction_id: &str) -> Result<TransactionRecord, CoordError> {
        self.call(self.req(Method::GET, &format!("/v1/transactions/{transaction_id}")))
            .await
    }

    async fn loss_report(&self, transaction_id: &str, bucket_s: f64) -> Result<LossReport, CoordError> {
        self.call(self.req(
            Method::GET,
            &format!("/v1/transactions/{transaction_id}/loss-report?bucket_s={bucket_s}"),
        ))
        .await
    }
}
