from __future__ import annotations

import logging

import pytest

from opcbridge.client import connect_loopback
from opcbridge.clock import SimClock
from opcbridge.model import Field, ScalarValue, StreamElement, StreamElementSchema, ValueType
from opcbridge.query import ByCount, ByTime, QuerySyntaxError, UnknownColumn
from opcbridge.server import OpcServer
from opcbridge.vsn import (
    CycleError, DeployLoop, Node, ProcessorContext, SchemaError, UnknownProcessor,
    UnknownProducer, default_registry, parse_vs_description,
)
from opcbridge.wrapper import ProductionMode
from conftest import server_config, steps_item
from vsd import local_vs, opc_vs


@pytest.fixture
def node(clock):
    server = OpcServer(server_config(steps_item("x"), steps_item("y", period=50),
                                     steps_item("a.b")), clock)
    n = Node(clock, default_registry(), lambda cfg: connect_loopback(server))
    n.server = server
    return n


def int_element(ts=0, **values):
    return StreamElement.from_values({k: ScalarValue.int32(v) for k, v in values.items()}, ts)


class TestParse:
    def test_minimal(self):
        desc = parse_vs_description(opc_vs(global_request="SELECT COUNT(*) FROM w",
                                           output='<field name="count_all" type="Int64"/>'),
                                    default_registry())
        (w,) = desc.wrappers
        assert (w.kind, w.items, w.update_period_ms, w.mode) == ("opc", ("x",), 100,
                                                                 ProductionMode.PERIODIC)
        assert desc.window == ByCount(3) and desc.processor.id == "forward"
        assert desc.output_schema == StreamElementSchema([Field("count_all", ValueType.INT64)])

    def test_time_window_and_params(self):
        desc = parse_vs_description(opc_vs(window='time-ms="500"',
                                           processor='id="forward" gain="2"'))
        assert desc.window == ByTime(500) and desc.processor.params == {"gain": "2"}

    def test_unknown_processor(self):
        with pytest.raises(UnknownProcessor):
            parse_vs_description(opc_vs(processor='id="nope"'), default_registry())

    def test_aggregate_in_wrapper_request(self):
        with pytest.raises(QuerySyntaxError):
            parse_vs_description(opc_vs(request="SELECT AVG(x) FROM w"))

    @pytest.mark.parametrize("doc,path", [
        ("<virtual-sensor", "/"),
        ("<sensor name='a'/>", "/"),
        (opc_vs().replace('name="vs1"', ""), "virtual-sensor@name"),
        (opc_vs().replace('<window count="3"/>', "<window/>"), "virtual-sensor/window"),
        (opc_vs(window='count="0"'), "virtual-sensor/window@count"),
        (opc_vs(window='count="x"'), "virtual-sensor/window@count"),
        (opc_vs(period=0), "virtual-sensor/wrapper[1]@update-period-ms"),
        (opc_vs(mode="SOMETIMES"), "virtual-sensor/wrapper[1]@mode"),
        (opc_vs(global_request="SELECT x FROM other"), "virtual-sensor/global-request"),
        (opc_vs(global_request="SELECT zz FROM w"), "virtual-sensor/global-request"),
        (opc_vs(output='<field name="x" type="Blob"/>'), "virtual-sensor/output/field[1]@type"),
        (opc_vs().replace("<output>", "<extra/><output>"), "virtual-sensor/extra"),
    ])
    def test_schema_errors(self, doc, path):
        with pytest.raises(SchemaError) as info:
            parse_vs_description(doc)
        assert info.value.path == path

    def test_request_must_select_from_own_wrapper(self):
        with pytest.raises(SchemaError):
            parse_vs_description(opc_vs(request="SELECT * FROM elsewhere"))

    def test_item_names_map_to_columns(self):
        desc = parse_vs_description(opc_vs(items="a.b", global_request="SELECT a_b FROM w",
                                           output='<field name="a_b" type="Int32"/>'))
        assert desc.wrappers[0].element_fields() == ["a_b"]

    def test_bundled_demo_files(self):
        from opcbridge.demo import data_path
        from opcbridge.demo.processors import demo_registry
        for name in ("workshop.vsd.xml", "camera.vsd.xml"):
            parse_vs_description(data_path(name).read_text(), demo_registry())


class TestIngest:
    def _vs(self, node, **kw):
        desc = parse_vs_description(opc_vs(**kw), node.registry)
        vs = node.deploy(desc)
        for w in vs.wrappers.values():  # drive ingest by hand
            w.activity.cancel()
        return vs

    def test_count_window(self, node):
        vs = self._vs(node, global_request="SELECT COUNT(x) FROM w",
                      output='<field name="count_x" type="Int64"/>')
        for i in range(5):
            out = vs.ingest("w", int_element(i, x=i))
        assert out[0]["count_x"] == ScalarValue.int64(3)

    def test_avg(self, node):
        vs = self._vs(node, global_request="SELECT AVG(x) FROM w",
                      output='<field name="avg_x" type="Float64"/>')
        for v in (1, 2, 3):
            out = vs.ingest("w", int_element(x=v))
        assert out[0]["avg_x"] == ScalarValue.float64(2.0)

    def test_where_filters(self, node):
        vs = self._vs(node, request="SELECT x FROM w WHERE x &gt; 2")
        assert vs.ingest("w", int_element(x=1)) == []
        assert vs.ingest("w", int_element(x=3))[0]["x"] == ScalarValue.int32(3)
        assert (vs.stats.ingested, vs.stats.selected, vs.stats.outputs) == (2, 1, 1)

    def test_outputs_stamped_with_now(self, node, clock):
        vs = self._vs(node)
        clock.run_until(777)
        assert vs.ingest("w", int_element(5, x=1))[0].timestamp == 777

    def test_processor_failure_is_isolated(self, node, caplog):
        def boom_factory(vs, node):
            def boom(rows, ctx):
                if rows[-1]["x"].payload == 2:
                    raise RuntimeError("boom")
                return ctx.element(x=rows[-1]["x"])
            return boom
        node.registry.register("boom", boom_factory)
        vs = self._vs(node, processor='id="boom"')
        with caplog.at_level(logging.ERROR):
            assert vs.ingest("w", int_element(x=2)) == []
        assert "boom" in caplog.text
        assert vs.ingest("w", int_element(x=3))[0]["x"] == ScalarValue.int32(3)
        assert vs.stats.processor_failures == 1

    def test_output_schema_enforced(self, node):
        def wrong_factory(vs, node):
            return lambda rows, ctx: StreamElement.from_values({"q": ScalarValue.text("")}, 0)
        node.registry.register("wrong", wrong_factory)
        vs = self._vs(node, processor='id="wrong"')
        assert vs.ingest("w", int_element(x=1)) == []
        assert vs.stats.processor_failures == 1

    def test_context_exposes_all_tables(self, node):
        seen = []

        def spy_factory(vs, node):
            def spy(rows, ctx: ProcessorContext):
                seen.append((ctx.source, {k: len(v) for k, v in ctx.tables.items()}))
                return None
            return spy
        node.registry.register("spy", spy_factory)
        vs = self._vs(node, processor='id="spy"')
        vs.ingest("w", int_element(x=1))
        assert seen == [("w", {"w": 1})]


class TestChaining:
    def test_every_output_arrives_once(self, node, clock):
        node.deploy(parse_vs_description(opc_vs("a", period=100), node.registry))
        node.deploy(parse_vs_description(local_vs("b", "a"), node.registry))
        got = {"a": [], "b": []}
        node.subscribe("a", lambda e: got["a"].append(e["x"]))
        node.subscribe("b", lambda e: got["b"].append(e["x"]))
        clock.run_until(2000)
        assert len(got["a"]) == 21 and got["a"] == got["b"]

    def test_unknown_producer(self, node):
        with pytest.raises(UnknownProducer):
            node.deploy(parse_vs_description(local_vs("b", "ghost"), node.registry))

    def test_unknown_column_on_producer(self, node):
        node.deploy(parse_vs_description(opc_vs("a"), node.registry))
        with pytest.raises(UnknownColumn):
            node.deploy(parse_vs_description(local_vs("b", "a", column="nope"), node.registry))

    def test_cycle_rejected(self, node):
        node.deploy(parse_vs_description(opc_vs("a"), node.registry))
        node.deploy(parse_vs_description(local_vs("b", "a"), node.registry))
        cyc = local_vs("a", "b")
        with pytest.raises(CycleError):
            node.deploy(parse_vs_description(cyc, node.registry))
        with pytest.raises(CycleError):
            node.deploy(parse_vs_description(local_vs("c", "c"), node.registry))
        assert node.names == ["a", "b"]

    def test_producer_undeployed(self, node, clock):
        node.deploy(parse_vs_description(opc_vs("a"), node.registry))
        node.deploy(parse_vs_description(local_vs("b", "a"), node.registry))
        got = []
        node.subscribe("b", got.append)
        clock.run_until(300)
        node.undeploy("a")
        n = len(got)
        clock.run_until(2000)
        assert len(got) == n and node.get("b").running


class TestDeployLoop:
    @pytest.fixture
    def loop(self, node, tmp_path):
        loop = DeployLoop(node, tmp_path, 100)
        loop.start()
        return loop

    def reads(self, node):
        return node.server.stats.sync_reads

    def test_drop_and_remove(self, node, clock, loop, tmp_path):
        clock.run_until(1000)
        (tmp_path / "a.vsd.xml").write_text(opc_vs("a", period=10))
        clock.run_until(1150)
        assert node.names == ["a"] and self.reads(node) > 0
        (tmp_path / "a.vsd.xml").unlink()
        clock.run_until(1350)
        assert node.names == []
        frozen = self.reads(node)
        clock.run_until(3000)
        assert self.reads(node) == frozen

    def test_malformed_file_leaves_others_running(self, node, clock, loop, tmp_path, caplog):
        (tmp_path / "a.vsd.xml").write_text(opc_vs("a", period=10))
        clock.run_until(50)
        with caplog.at_level(logging.ERROR):
            (tmp_path / "bad.vsd.xml").write_text("<virtual-sensor name='x'>")
            clock.run_until(250)
        assert "bad.vsd.xml" in caplog.text and "bad.vsd.xml" in str(list(loop.errors))
        before = self.reads(node)
        clock.run_until(500)
        assert node.names == ["a"] and self.reads(node) - before == 25

    def test_broken_edit_keeps_old_version(self, node, clock, loop, tmp_path):
        path = tmp_path / "a.vsd.xml"
        path.write_text(opc_vs("a", period=10))
        clock.run_until(50)
        vs = node.get("a")
        path.write_text(opc_vs("a", period=10, processor='id="nope"'))
        clock.run_until(300)
        assert node.get("a") is vs and vs.running
        path.write_text(opc_vs("a", period=20))
        clock.run_until(500)
        assert node.get("a") is not vs
        assert node.get("a").desc.wrappers[0].update_period_ms == 20

    def test_identical_redrop_is_noop(self, node, clock, loop, tmp_path):
        path = tmp_path / "a.vsd.xml"
        path.write_text(opc_vs("a"))
        clock.run_until(50)
        vs = node.get("a")
        path.write_text(opc_vs("a"))
        clock.run_until(500)
        assert node.get("a") is vs

    def test_consumer_before_producer(self, node, clock, loop, tmp_path):
        (tmp_path / "b.vsd.xml").write_text(local_vs("b", "zz_a"))
        clock.run_until(150)
        assert node.names == [] and loop.errors
        (tmp_path / "zz_a.vsd.xml").write_text(opc_vs("zz_a"))
        clock.run_until(350)
        assert node.names == ["b", "zz_a"] and not loop.errors

    def test_duplicate_vs_name(self, node, clock, loop, tmp_path):
        (tmp_path / "a.vsd.xml").write_text(opc_vs("a"))
        (tmp_path / "b.vsd.xml").write_text(opc_vs("a"))
        clock.run_until(50)
        assert node.names == ["a"]
        assert any("already deployed" in e for e in loop.errors.values())
