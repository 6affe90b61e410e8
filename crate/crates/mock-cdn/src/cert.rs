//! Throwaway PKI for the mock fleet: one self-signed CA per fleet, one
//! leaf per edge. The CA certificate is exported as PEM so a client can
//! be pointed at it as its only trust anchor.

use rcgen::{BasicConstraints, CertificateParams, CertifiedIssuer, DnType, IsCa, KeyPair};
use rustls::pki_types::{CertificateDer, PrivateKeyDer};

use crate::MockCdnError;

pub struct MockCa {
    issuer: CertifiedIssuer<'static, KeyPair>,
}

/// A leaf certificate plus its private key, ready for a rustls server.
/// The chain carries the leaf followed by the CA certificate.
pub struct MintedIdentity {
    pub sans: Vec<String>,
    pub chain: Vec<CertificateDer<'static>>,
    pub key: PrivateKeyDer<'static>,
}

impl MockCa {
    pub fn new(common_name: &str) -> Result<MockCa, MockCdnError> {
        let key = KeyPair::generate()?;
        let mut params = CertificateParams::new(Vec::<String>::new())?;
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params
            .distinguished_name
            .push(DnType::CommonName, common_name);
        let issuer = CertifiedIssuer::self_signed(params, key)?;
        Ok(MockCa { issuer })
    }

    pub fn ca_pem(&self) -> String {
        self.issuer.pem()
    }

    pub fn ca_der(&self) -> &CertificateDer<'static> {
        self.issuer.der()
    }

    /// Mints a leaf valid for exactly the given DNS names (wildcards like
    /// `*.example.test` are allowed as-is).
    pub fn mint(&self, sans: &[String]) -> Result<MintedIdentity, MockCdnError> {
        if sans.is_empty() {
            return Err(MockCdnError::EmptySanList);
        }
        let key = KeyPair::generate()?;
        let params = CertificateParams::new(sans.to_vec())?;
        let leaf = params.signed_by(&key, &self.issuer)?;
        let key = PrivateKeyDer::try_from(key.serialize_der())
            .map_err(|e| MockCdnError::Key(e.to_string()))?;
        Ok(MintedIdentity {
            sans: sans.to_vec(),
            chain: vec![leaf.der().clone(), self.ca_der().clone()],
            key,
        })
    }
}
