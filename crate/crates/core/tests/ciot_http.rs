use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use fencewire::ciot::{
    bind, BoundServer, Broker, ChannelAccess, ChannelClient, ChannelConfig, CiotError, FieldSet,
    FieldSlot, HttpClient, ServerError, WriteOutcome,
};
use fencewire::time::{SimClock, Timestamp};

fn slot(n: u8) -> FieldSlot {
    FieldSlot::new(n).unwrap()
}

fn fields(pairs: &[(u8, &str)]) -> FieldSet {
    pairs
        .iter()
        .map(|(s, v)| (slot(*s), v.to_string()))
        .collect()
}

fn start(min_interval: f64) -> (BoundServer, Arc<SimClock>) {
    let cfg = ChannelConfig::new(1, "W", "R").with_min_write_interval(min_interval);
    let broker = Arc::new(Broker::new(vec![cfg]).unwrap());
    let clock = Arc::new(SimClock::new(Timestamp::SIM_EPOCH));
    let server = bind("127.0.0.1:0".parse().unwrap(), broker, clock.clone()).unwrap();
    (server, clock)
}

fn client(server: &BoundServer, channel: u64, write: &str, read: &str) -> HttpClient {
    HttpClient::new(&server.endpoint(), ChannelAccess::new(channel, write, read))
}

#[test]
fn publish_then_read_back() {
    let (server, clock) = start(1.0);
    let mut c = client(&server, 1, "W", "R");
    assert_eq!(c.fetch_last().unwrap(), None);
    assert!(c.fetch_feed(5).unwrap().is_empty());

    assert_eq!(
        c.publish(&fields(&[(1, "1.20"), (8, "0.000000")])).unwrap(),
        WriteOutcome::Accepted(1)
    );
    clock.advance_micros(400_000);
    assert_eq!(
        c.publish(&fields(&[(1, "9.99")])).unwrap(),
        WriteOutcome::Rejected
    );
    clock.advance_micros(600_000);
    assert_eq!(
        c.publish(&fields(&[(1, "1.10"), (8, "1.000000")])).unwrap(),
        WriteOutcome::Accepted(2)
    );
    clock.advance_micros(1_500_000);
    assert_eq!(
        c.publish(&fields(&[(1, "1.00"), (8, "2.500000")])).unwrap(),
        WriteOutcome::Accepted(3)
    );

    let last = c.fetch_last().unwrap().unwrap();
    assert_eq!(last.entry_id, 3);
    assert_eq!(last.field(slot(1)), Some("1.00"));
    assert_eq!(last.created_at, Timestamp::SIM_EPOCH.add_secs(2.0));

    let feed = c.fetch_feed(2).unwrap();
    assert_eq!(
        feed.iter().map(|e| e.entry_id).collect::<Vec<_>>(),
        vec![2, 3]
    );
    assert!(feed[0].created_at <= feed[1].created_at);

    let refined = c.fetch_refined(2).unwrap();
    assert_eq!(refined.window, 2);
    assert!((refined.means[&slot(1)] - 1.05).abs() < 1e-12);
    assert_eq!(refined.latest.unwrap().entry_id, 3);
    // the raw log is untouched
    assert_eq!(
        c.fetch_last().unwrap().unwrap().field(slot(1)),
        Some("1.00")
    );
    server.shutdown().unwrap();
}

#[test]
fn wrong_keys_are_auth_errors() {
    let (server, _clock) = start(0.0);
    let mut bad_write = client(&server, 1, "nope", "R");
    assert_eq!(
        bad_write.publish(&fields(&[(1, "1")])),
        Err(CiotError::Auth)
    );
    let mut bad_read = client(&server, 1, "W", "nope");
    assert_eq!(bad_read.fetch_last(), Err(CiotError::Auth));
    assert_eq!(bad_read.fetch_feed(1), Err(CiotError::Auth));

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .post(format!("{}/update", server.endpoint()))
        .content_type("application/x-www-form-urlencoded")
        .send("api_key=nope&field1=1")
        .unwrap();
    assert_eq!(resp.status().as_u16(), 401);
    assert_eq!(resp.body_mut().read_to_string().unwrap(), "error_auth");
    server.shutdown().unwrap();
}

#[test]
fn unknown_channel_is_not_found() {
    let (server, _clock) = start(0.0);
    let mut c = client(&server, 42, "W", "R");
    assert_eq!(c.fetch_last(), Err(CiotError::NotFound(42)));
    assert_eq!(c.fetch_feed(1), Err(CiotError::NotFound(42)));
    server.shutdown().unwrap();
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut c = HttpClient::with_timeout(
        &format!("http://127.0.0.1:{port}"),
        ChannelAccess::new(1, "W", "R"),
        Duration::from_millis(500),
    );
    let err = c.publish(&fields(&[(1, "1")])).unwrap_err();
    assert!(err.is_transport(), "{err:?}");
    assert!(c.fetch_last().unwrap_err().is_transport());
}

#[test]
fn second_bind_on_a_port_is_addr_in_use() {
    let (server, clock) = start(0.0);
    let broker = Arc::new(Broker::new(vec![ChannelConfig::new(1, "W", "R")]).unwrap());
    match bind(server.local_addr(), broker, clock) {
        Err(ServerError::AddrInUse(addr)) => assert_eq!(addr, server.local_addr()),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second bind succeeded"),
    }
    server.shutdown().unwrap();
}
