import hashlib
import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_alert, make_evidence
from socdesk.featurize import (
    CATEGORICAL_COLUMNS,
    MANIFEST_V1,
    EncoderModel,
    alerts_to_matrix,
    encode_alert,
    extract_numeric_features,
    fit_encoder,
    form_incidents,
    incident_hash,
    incidents_to_matrix,
    majority_grade,
    sample_incidents,
)
from socdesk.telemetry import EntityKind, Grade

IDX = {name: i for i, name in enumerate(MANIFEST_V1.names)}


class TestNumericFeatures:
    def test_no_evidence(self):
        vec = extract_numeric_features(make_alert(evidence=[]))
        assert vec[IDX["evidence_count"]] == 0
        for name in MANIFEST_V1.names:
            if name.startswith("distinct_") or name.startswith("evtype_"):
                assert vec[IDX[name]] == 0

    def test_distinct_ip_counting(self):
        # 3 ip evidences, 2 distinct addresses.
        evidence = [
            make_evidence(ip_address="10.0.0.1"),
            make_evidence(ip_address="10.0.0.1"),
            make_evidence(ip_address="10.0.0.2"),
        ]
        vec = extract_numeric_features(make_alert(evidence=evidence))
        assert vec[IDX["distinct_ip"]] == 2
        assert vec[IDX["evidence_count"]] == 3
        assert vec[IDX["evtype_Ip"]] == 3

    def test_manifest_length_is_versioned_constant(self):
        # Near the production width of 67; pinned per manifest version.
        assert len(MANIFEST_V1) == 56
        vec = extract_numeric_features(make_alert())
        assert vec.shape == (56,)

    def test_value_ranges(self):
        evidence = [make_evidence(kind=EntityKind.USER, account_object_id="u1", last_verdict="Malicious")]
        vec = extract_numeric_features(make_alert(evidence=evidence, techniques=("T1", "T2")))
        cyclic = {"hour_sin", "hour_cos", "dow_sin", "dow_cos"}
        for name in MANIFEST_V1.names:
            value = vec[IDX[name]]
            assert np.isfinite(value)
            if name in cyclic:
                assert -1.0 <= value <= 1.0
            else:
                assert value >= 0

    def test_verdict_counts(self):
        evidence = [
            make_evidence(last_verdict="Malicious"),
            make_evidence(last_verdict="Suspicious"),
            make_evidence(suspicion_level="Suspicious"),
            make_evidence(last_verdict="NoThreatsFound"),
        ]
        vec = extract_numeric_features(make_alert(evidence=evidence))
        assert vec[IDX["malicious_evidence_count"]] == 1
        assert vec[IDX["suspicious_evidence_count"]] == 2


def _stream(counts: dict[str, int]):
    alerts = []
    serial = 0
    for detector, count in counts.items():
        for _ in range(count):
            alerts.append(make_alert(alert_id=f"a{serial}", detector_id=detector))
            serial += 1
    return alerts


class TestEncoder:
    def test_min_cardinality_threshold(self):
        encoder = fit_encoder(_stream({"a": 12, "b": 10, "d": 9}), min_cardinality=10)
        assert set(encoder.vocabularies["detector_id"]) == {"a", "b"}
        encoded = encode_alert(encoder, make_alert(detector_id="d"))
        assert encoder.generic_index("detector_id") in encoded.ohe_indices

    def test_threshold_disabled(self):
        encoder = fit_encoder(_stream({"a": 1, "b": 2, "c": 1}), min_cardinality=1)
        assert set(encoder.vocabularies["detector_id"]) == {"a", "b", "c"}

    def test_nine_of_ten_goes_generic(self):
        encoder = fit_encoder(_stream({"rare": 9, "common": 30}), min_cardinality=10)
        assert "rare" not in encoder.vocabularies["detector_id"]
        assert "common" in encoder.vocabularies["detector_id"]

    def test_empty_stream_errors(self):
        with pytest.raises(ValueError):
            fit_encoder([], min_cardinality=10)

    def test_all_unseen_categoricals_hit_six_generic_buckets(self):
        encoder = fit_encoder(_stream({"a": 12}), min_cardinality=10)
        alien = make_alert(
            org_id="neworg", detector_id="newdet", product_id="newprod",
            category="NewCat", severity=3, techniques=("T9999",),
        )
        encoded = encode_alert(encoder, alien)
        generics = {encoder.generic_index(c) for c in CATEGORICAL_COLUMNS}
        assert set(encoded.ohe_indices) == generics
        assert len(encoded.ohe_indices) == 6

    def test_in_vocab_detector_sets_its_index(self):
        encoder = fit_encoder(_stream({"known": 15}), min_cardinality=10)
        encoded = encode_alert(encoder, make_alert(detector_id="known"))
        offset = encoder._offsets["detector_id"]
        local = encoder.vocabularies["detector_id"]["known"]
        assert offset + local in encoded.ohe_indices
        assert encoder.generic_index("detector_id") not in encoded.ohe_indices

    def test_encode_dim_constant_between_fit_and_inference(self):
        train = _stream({"a": 12, "b": 11})
        encoder = fit_encoder(train, min_cardinality=10)
        dim = encoder.encode_dim
        for alert in [make_alert(detector_id="zzz", org_id="other"), make_alert()]:
            encoded = encode_alert(encoder, alert)
            assert max(encoded.ohe_indices) < encoder.ohe_dim <= dim
            assert len(encoded.numeric) + encoder.ohe_dim == dim

    def test_indices_strictly_increasing(self):
        encoder = fit_encoder(_stream({"a": 12}), min_cardinality=1)
        encoded = encode_alert(encoder, make_alert(techniques=("T1", "T2")))
        assert list(encoded.ohe_indices) == sorted(set(encoded.ohe_indices))

    def test_round_trip(self, tmp_path):
        encoder = fit_encoder(_stream({"a": 12, "b": 10, "c": 25}), min_cardinality=10)
        path = tmp_path / "encoder.json"
        encoder.save(path)
        loaded = EncoderModel.load(path)
        assert loaded.vocabularies == encoder.vocabularies
        assert loaded.min_cardinality == encoder.min_cardinality
        assert loaded.encode_dim == encoder.encode_dim
        loaded.save(tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.sampled_from(["d1", "d2", "d3", "d4", "d5"]), min_size=1, max_size=60),
        st.integers(1, 8),
    )
    def test_vocabulary_support_property(self, detectors, c):
        alerts = [make_alert(alert_id=f"a{i}", detector_id=d) for i, d in enumerate(detectors)]
        counts = Counter(detectors)
        encoder = fit_encoder(alerts, min_cardinality=c)
        vocab = set(encoder.vocabularies["detector_id"])
        for value, count in counts.items():
            assert (value in vocab) == (count >= c)

    @settings(max_examples=30, deadline=None)
    @given(st.text(max_size=8), st.text(max_size=8), st.integers(0, 3))
    def test_encode_totality(self, detector, category, severity):
        encoder = fit_encoder(_stream({"a": 3}), min_cardinality=2)
        alert = make_alert(detector_id=detector, category=category, severity=severity)
        encoded = encode_alert(encoder, alert)
        assert len(encoded.ohe_indices) >= 5


class TestIncidentHash:
    def test_empty_set_is_sha1_of_empty_string(self):
        assert incident_hash([]) == hashlib.sha1(b"").hexdigest()

    def test_order_and_multiplicity_invariance(self):
        assert incident_hash(["d2", "d1"]) == incident_hash(["d1", "d2", "d2"])

    def test_joined_digest(self):
        # Oracle: standard SHA-1 over the joined canonical string.
        assert incident_hash(["d1", "d2"]) == hashlib.sha1(b"d1|d2").hexdigest()

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(["a", "b", "c", "dd"]), max_size=8), st.randoms())
    def test_permutation_property(self, detectors, rnd):
        shuffled = list(detectors)
        rnd.shuffle(shuffled)
        assert incident_hash(detectors) == incident_hash(shuffled + shuffled)


class TestMajorityGrade:
    @pytest.mark.parametrize("grades,expected", [
        ([Grade.TP, Grade.FP], Grade.TP),
        ([Grade.BP], Grade.BP),
        ([Grade.FP, Grade.FP, Grade.BP], Grade.FP),
        ([Grade.FP, Grade.BP], Grade.FP),
        ([Grade.BP, Grade.BP, Grade.TP], Grade.BP),
        ([], None),
    ])
    def test_cases(self, grades, expected):
        assert majority_grade(grades) is expected

    def test_exhaustive_multisets_up_to_five(self):
        # Brute-force counter with TP > FP > BP tie priority.
        priority = [Grade.TP, Grade.FP, Grade.BP]
        for size in range(1, 6):
            for combo in itertools.combinations_with_replacement(priority, size):
                counts = Counter(combo)
                top = max(counts.values())
                expected = next(g for g in priority if counts.get(g) == top)
                assert majority_grade(list(combo)) is expected, combo


class TestFormIncidents:
    def _encode(self, alerts, c=1):
        encoder = fit_encoder(alerts, min_cardinality=c)
        return encoder, [encode_alert(encoder, a) for a in alerts]

    def test_ties_go_to_tp(self):
        alerts = [
            make_alert(alert_id="a1", grade=Grade.TP),
            make_alert(alert_id="a2", grade=Grade.FP),
        ]
        _, encoded = self._encode(alerts)
        (incident,) = form_incidents(encoded)
        assert incident.grade is Grade.TP

    def test_numeric_vector_is_exact_sum(self):
        alerts = [
            make_alert(alert_id="a1", evidence=[make_evidence(ip_address="10.0.0.1")]),
            make_alert(alert_id="a2", evidence=[make_evidence(ip_address="10.0.0.2"), make_evidence()]),
        ]
        _, encoded = self._encode(alerts)
        (incident,) = form_incidents(encoded)
        np.testing.assert_array_equal(incident.numeric, encoded[0].numeric + encoded[1].numeric)

    def test_require_grade_drops_ungraded(self):
        alerts = [
            make_alert(alert_id="a1", incident_id="i1", grade=Grade.BP),
            make_alert(alert_id="a2", incident_id="i2"),
        ]
        _, encoded = self._encode(alerts)
        assert len(form_incidents(encoded, require_grade=False)) == 2
        kept = form_incidents(encoded, require_grade=True)
        assert [i.incident_id for i in kept] == ["i1"]

    def test_detector_set_and_hash(self):
        alerts = [
            make_alert(alert_id="a1", detector_id="dz"),
            make_alert(alert_id="a2", detector_id="da"),
            make_alert(alert_id="a3", detector_id="dz"),
        ]
        _, encoded = self._encode(alerts)
        (incident,) = form_incidents(encoded)
        assert incident.detector_set == ("da", "dz")
        assert incident.incident_hash == hashlib.sha1(b"da|dz").hexdigest()
        assert incident.latest_timestamp == max(a.timestamp for a in alerts)

    def test_ohe_counts_merge(self):
        alerts = [make_alert(alert_id=f"a{i}") for i in range(3)]
        encoder, encoded = self._encode(alerts)
        (incident,) = form_incidents(encoded)
        for index in encoded[0].ohe_indices:
            assert incident.ohe_counts[index] == 3.0


class TestSampling:
    def _incident(self, serial, detector, grade=Grade.TP):
        alert = make_alert(alert_id=f"a{serial}", incident_id=f"i{serial}", detector_id=detector, grade=grade)
        encoder = fit_encoder([alert], min_cardinality=1)
        return form_incidents([encode_alert(encoder, alert)])[0]

    def test_over_cap_is_trimmed(self):
        incidents = [self._incident(i, "d1") for i in range(15)]
        sampled = sample_incidents(incidents, cap=10, seed=1)
        assert len(sampled) == 10

    def test_under_cap_passes_through(self):
        incidents = [self._incident(i, "d1") for i in range(3)]
        sampled = sample_incidents(incidents, cap=1000, seed=1)
        assert [i.incident_id for i in sampled] == [i.incident_id for i in incidents]

    def test_fixed_seed_is_stable(self):
        incidents = [self._incident(i, "d1") for i in range(30)]
        first = [i.incident_id for i in sample_incidents(incidents, cap=7, seed=42)]
        second = [i.incident_id for i in sample_incidents(incidents, cap=7, seed=42)]
        assert first == second
        third = [i.incident_id for i in sample_incidents(incidents, cap=7, seed=43)]
        assert first != third

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["d1", "d2"]), st.sampled_from([Grade.TP, Grade.FP])), max_size=40),
           st.integers(1, 6))
    def test_cap_property(self, specs, cap):
        incidents = [self._incident(i, d, g) for i, (d, g) in enumerate(specs)]
        sampled = sample_incidents(incidents, cap=cap, seed=0)
        per_key = Counter((i.incident_hash, i.grade_tag) for i in sampled)
        assert all(count <= cap for count in per_key.values())
        surviving = {i.incident_id for i in sampled}
        assert surviving <= {i.incident_id for i in incidents}


class TestMatrices:
    def test_alert_matrix_contents(self):
        alerts = [make_alert(alert_id="a1", evidence=[make_evidence(ip_address="10.9.9.9")]),
                  make_alert(alert_id="a2")]
        encoder = fit_encoder(alerts, min_cardinality=1)
        encoded = [encode_alert(encoder, a) for a in alerts]
        matrix = alerts_to_matrix(encoder, encoded).toarray()
        assert matrix.shape == (2, encoder.encode_dim)
        for index in encoded[0].ohe_indices:
            assert matrix[0, index] == 1.0
        np.testing.assert_array_equal(matrix[0, encoder.ohe_dim:], encoded[0].numeric)

    def test_incident_matrix_matches_sums(self):
        alerts = [make_alert(alert_id=f"a{i}") for i in range(4)]
        encoder = fit_encoder(alerts, min_cardinality=1)
        encoded = [encode_alert(encoder, a) for a in alerts]
        incidents = form_incidents(encoded)
        matrix = incidents_to_matrix(encoder, incidents).toarray()
        alert_matrix = alerts_to_matrix(encoder, encoded).toarray()
        np.testing.assert_allclose(matrix[0], alert_matrix.sum(axis=0))
