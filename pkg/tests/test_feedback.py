import json

import httpx
import numpy as np
import pytest

from postcast.actions import ActionKind, sample_instance
from postcast.errors import TransportError
from postcast.feedback import (
    DirectiveRejected,
    LlmConfig,
    inject,
    parse_grammar,
    parse_llm,
    validate_directive_payload,
)
from postcast.search import OptimizerConfig


class TestGrammar:
    def test_quantile_phrase_with_catalog_clamp(self):
        d = parse_grammar("increase values above quantile 80 by 10% to 50%")
        assert len(d.items) == 1
        item = d.items[0]
        assert item.kind is ActionKind.PIECEWISE_SCALE_HIGH
        assert item.overrides["quantile"] == (80.0, 80.0)
        assert item.overrides["factor"] == (10.0, 10.0)
        assert any("clamped" in w for w in d.warnings)

    def test_amplitude_range_fits_catalog(self):
        d = parse_grammar("increase the amplitude by 5% to 10%")
        item = d.items[0]
        assert item.kind is ActionKind.SCALE_AMPLITUDE
        assert item.overrides["factor"] == (5.0, 10.0)
        assert not d.warnings

    def test_amplitude_clamp_warns(self):
        d = parse_grammar("increase the amplitude by 8% to 15%")
        assert d.items[0].overrides["factor"] == (8.0, 10.0)
        assert any("clamped" in w for w in d.warnings)

    def test_unrecognized_text_gets_template_hint(self):
        with pytest.raises(DirectiveRejected) as exc:
            parse_grammar("make it purple")
        assert "template" in exc.value.hint

    def test_empty_text(self):
        with pytest.raises(DirectiveRejected, match="empty"):
            parse_grammar("   ")

    def test_decrease_negates(self):
        d = parse_grammar("decrease the amplitude by 3% to 5%")
        assert d.items[0].overrides["factor"] == (-5.0, -3.0)

    def test_below_quantile_maps_to_low(self):
        d = parse_grammar("decrease values below quantile 20 by 0.5%")
        item = d.items[0]
        assert item.kind is ActionKind.PIECEWISE_SCALE_LOW
        assert item.overrides["quantile"] == (20.0, 20.0)
        assert item.overrides["factor"] == (-0.5, -0.5)

    def test_entirely_out_of_catalog_rejected(self):
        # piecewise factors only reach -1%: a 5% decrease cannot be honored
        with pytest.raises(DirectiveRejected, match="outside"):
            parse_grammar("decrease values below quantile 20 by 5%")

    def test_quantile_must_be_percentile(self):
        with pytest.raises(DirectiveRejected, match="between 0 and 100"):
            parse_grammar("increase values above quantile 120 by 5%")

    def test_quantile_clamped_into_catalog_band(self):
        d = parse_grammar("increase values above quantile 50 by 5%")
        assert d.items[0].overrides["quantile"] == (70.0, 70.0)
        assert any("quantile" in w for w in d.warnings)

    def test_minimum_and_trend_targets(self):
        d = parse_grammar("increase the minimum by 4%")
        assert d.items[0].kind is ActionKind.INCREASE_MINIMUM_FACTOR
        d = parse_grammar("increase the trend by 2%")
        assert d.items[0].kind is ActionKind.LINEAR_TREND_SLOPE
        assert d.items[0].overrides["slope"] == (2.0, 2.0)

    def test_shift_phrases(self):
        d = parse_grammar("shift the series by 3 steps")
        assert d.items[0].kind is ActionKind.SHIFT_SERIES
        assert d.items[0].overrides["steps"] == (3.0, 3.0)
        d = parse_grammar("shift the series by 4 steps backward")
        assert d.items[0].overrides["steps"] == (-4.0, -4.0)

    def test_multi_clause(self):
        d = parse_grammar(
            "increase the amplitude by 2% and shift the series by 1 step"
        )
        assert {i.kind for i in d.items} == {
            ActionKind.SCALE_AMPLITUDE,
            ActionKind.SHIFT_SERIES,
        }

    def test_deterministic(self):
        text = "increase values above quantile 85 by 3% to 6%"
        assert parse_grammar(text) == parse_grammar(text)

    def test_case_insensitive(self):
        d = parse_grammar("Increase The Amplitude By 5%")
        assert d.items[0].kind is ActionKind.SCALE_AMPLITUDE


def _mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


class TestLlmPath:
    CFG = LlmConfig(endpoint="http://llm.test/v1/parse", max_retries=2)

    def test_schema_echo_accepted(self):
        def handler(request):
            body = json.loads(request.content)
            assert "system" in body and "user" in body
            return httpx.Response(
                200,
                json={"kind": "ScaleAmplitude", "params": {"factor_low": 2, "factor_high": 4}},
            )

        d = parse_llm("raise the amplitude a bit", self.CFG, client=_mock_client(handler))
        assert d.provenance == "llm"
        assert d.items[0].overrides["factor"] == (2.0, 4.0)

    def test_actions_list_form(self):
        def handler(request):
            return httpx.Response(
                200,
                json={
                    "actions": [
                        {"kind": "PiecewiseScaleHigh", "params": {"quantile": 80, "factor": [1, 5]}}
                    ]
                },
            )

        d = parse_llm("boost the peaks", self.CFG, client=_mock_client(handler))
        assert d.items[0].kind is ActionKind.PIECEWISE_SCALE_HIGH
        assert d.items[0].overrides["quantile"] == (80.0, 80.0)

    def test_prose_rejected_after_retries(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(200, text="Sure! I'd increase the amplitude by 5%.")

        with pytest.raises(DirectiveRejected) as exc:
            parse_llm("anything", self.CFG, client=_mock_client(handler))
        assert len(calls) == self.CFG.max_retries + 1
        assert exc.value.raw_response.startswith("Sure!")

    def test_out_of_catalog_rejected_not_clamped(self):
        def handler(request):
            return httpx.Response(
                200, json={"kind": "ScaleAmplitude", "params": {"factor": [100, 500]}}
            )

        with pytest.raises(DirectiveRejected, match="exceeds catalog"):
            parse_llm("go wild", self.CFG, client=_mock_client(handler))

    def test_transport_error(self):
        def handler(request):
            raise httpx.ConnectError("refused")

        with pytest.raises(TransportError):
            parse_llm("hello", self.CFG, client=_mock_client(handler))

    def test_http_error_status_is_transport(self):
        def handler(request):
            return httpx.Response(503, text="overloaded")

        with pytest.raises(TransportError):
            parse_llm("hello", self.CFG, client=_mock_client(handler))

    def test_no_endpoint_configured(self):
        with pytest.raises(DirectiveRejected, match="endpoint"):
            parse_llm("hello", LlmConfig(endpoint=None))

    def test_unknown_kind_rejected(self):
        with pytest.raises(DirectiveRejected, match="unknown action kind"):
            validate_directive_payload(
                {"kind": "FourierBoost", "params": {}}, "t", "llm"
            )


class TestInject:
    def test_restricts_sampling(self):
        d = parse_grammar("increase the amplitude by 6% to 8%")
        cfg = inject(d, OptimizerConfig(strategy="random", budget=50))
        rng = np.random.default_rng(0)
        assert cfg.space.kinds == (ActionKind.SCALE_AMPLITUDE,)
        for _ in range(100):
            inst = sample_instance(ActionKind.SCALE_AMPLITUDE, rng, space=cfg.space)
            assert 6.0 <= inst.params[0] <= 8.0

    def test_empty_directive_is_identity(self):
        from postcast.feedback import FeedbackDirective

        cfg = OptimizerConfig(budget=10)
        d = FeedbackDirective(raw_text="", items=(), provenance="grammar")
        assert inject(d, cfg) is cfg

    def test_rounds_do_not_compose(self):
        cfg = OptimizerConfig(budget=10)
        cfg = inject(parse_grammar("increase the amplitude by 2%"), cfg)
        cfg = inject(parse_grammar("shift the series by 2 steps"), cfg)
        assert cfg.space.kinds == (ActionKind.SHIFT_SERIES,)

    def test_directive_serialization(self):
        d = parse_grammar("increase values above quantile 80 by 5%")
        payload = d.to_dict()
        assert payload["provenance"] == "grammar"
        assert payload["items"][0]["kind"] == "PiecewiseScaleHigh"
