"""
コマンドラインインターフェース

run / convergence / spectrum / project / info の各コマンドを Commands に委譲し、
例外を終了コード (0 正常, 2 設定, 3 入出力, 4 ソルバー, 5 受け入れ条件) に変換する。
"""

import json
import math
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import click

from hdivflow.config import Config
from hdivflow.exceptions import ConfigError, MeshError, SolverError
from hdivflow.services.benchmarks import (
    convergence_study,
    load_case,
    projection_study,
    write_convergence_table,
)
from hdivflow.services.diagnostics import (
    energy_spectrum,
    fit_spectrum_slope,
    write_error_series,
    write_spectrum,
    write_time_series,
)
from hdivflow.services.mesh import mesh_statistics
from hdivflow.services.solver import build_spaces, load_checkpoint, restore_state, run_transient
from hdivflow.services.utils import check_order, format_order
from hdivflow.utils import cleanup_caches, get_logger, setup_logging

# 終了コード
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVER = 4
EXIT_ACCEPTANCE = 5

# Stokes 射影の L²/エネルギー誤差比の期待傾き
PROJECTION_RATIO_SLOPE = 1.0
PROJECTION_RATIO_TOLERANCE = 0.3


class Commands:
    """コマンドコントローラー"""

    def __init__(self):
        self.config = Config()
        self.logger = get_logger(__name__)

    def _execute(self, action: Callable[[], int], quiet: bool) -> int:
        """処理を実行し、例外を終了コードに対応付ける"""
        setup_logging(quiet)
        try:
            return action()
        except ConfigError as e:
            self.logger.error(f"設定エラー: {e}")
            click.echo(f"設定エラー: {e}", err=True)
            return EXIT_CONFIG
        except (MeshError, ValueError) as e:
            self.logger.error(f"入力エラー: {e}")
            click.echo(f"入力エラー: {e}", err=True)
            return EXIT_CONFIG
        except OSError as e:
            self.logger.error(f"入出力エラー: {e}")
            click.echo(f"入出力エラー: {e}", err=True)
            return EXIT_IO
        except SolverError as e:
            self.logger.error(f"ソルバーエラー: {e}")
            click.echo(f"ソルバーエラー: {e}", err=True)
            return EXIT_SOLVER
        finally:
            cleanup_caches()

    def _output_dir(self, out: Optional[str], default: str) -> Path:
        path = Path(out or default)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _report(self, payload: Dict[str, Any], quiet: bool) -> None:
        if not quiet:
            click.echo(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True, default=_json_default))

    def run(self, config_path: Optional[str], overrides: Sequence[str], out: Optional[str], quiet: bool) -> int:
        """ケースを時間発展させ、時系列・スペクトル・スナップショット・要約を書き出す"""

        def action() -> int:
            case = load_case(config_path, overrides)
            out_dir = self._output_dir(out, case.out_dir)
            record = run_transient(case, out_dir)
            write_time_series(record.rows, out_dir / "time_series.csv")
            if record.error_rows:
                write_error_series(record.error_rows, out_dir / "errors.csv")
            summary = record.summary()
            summary["spectra"] = sorted(record.spectra)
            summary["snapshots"] = len(record.snapshots)
            (out_dir / "summary.json").write_text(
                json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True, default=_json_default), encoding="utf-8")
            self._report(summary, quiet)
            if not record.complete:
                click.echo(f"実行が途中で停止しました: {record.failure}", err=True)
                return EXIT_SOLVER
            return EXIT_OK

        return self._execute(action, quiet)

    def convergence(self, config_path: Optional[str], overrides: Sequence[str], out: Optional[str], quiet: bool) -> int:
        """収束次数調査を実行し、期待次数との比較を終了コードに反映する"""

        def action() -> int:
            case = load_case(config_path, overrides)
            out_dir = self._output_dir(out, case.out_dir)
            table = convergence_study(case)
            write_convergence_table(table, out_dir / "convergence.csv")
            if not quiet:
                for row in table.rows:
                    click.echo(f"h={row['h']:.5f}  L2={row['l2']:.4e} ({format_order(row['l2_order'])})  "
                               f"energy={row['energy']:.4e} ({format_order(row['energy_order'])})  "
                               f"combined={row['combined']:.4e} ({format_order(row['combined_order'])})")
                click.echo(f"{table.key} 次数 {format_order(table.final_order)} / 期待 "
                           f"{table.expected_order:g}±{table.tolerance:g}: {'合格' if table.passed else '不合格'}")
            return EXIT_OK if table.passed else EXIT_ACCEPTANCE

        return self._execute(action, quiet)

    def spectrum(self, checkpoint: str, grid_n: int, kappa_min: float, kappa_max: float,
                 out: Optional[str], quiet: bool) -> int:
        """チェックポイントからエネルギースペクトルと傾きを求める"""

        def action() -> int:
            state = restore_state(load_checkpoint(checkpoint))
            result = energy_spectrum(state.velocity, grid_n)
            slope = fit_spectrum_slope(result, kappa_min, kappa_max)
            out_dir = self._output_dir(out, Config.DEFAULT_OUT_DIR)
            path = out_dir / f"spectrum_t{state.t:g}.csv"
            write_spectrum(result, path, slope)
            self._report({"file": str(path), "t": state.t, "slope": slope, "parseval_error": result.parseval_error,
                          "kappa_range": [kappa_min, kappa_max]}, quiet)
            if slope is None:
                click.echo("傾きは定義できません（範囲内のビンが 2 個未満）", err=True)
            return EXIT_OK

        return self._execute(action, quiet)

    def project(self, config_path: Optional[str], overrides: Sequence[str], out: Optional[str], quiet: bool) -> int:
        """初期速度の Stokes 射影の誤差と冪等性を報告する"""

        def action() -> int:
            case = load_case(config_path, overrides)
            out_dir = self._output_dir(out, case.out_dir)
            study = projection_study(case)
            header = ["h", "num_dofs", "l2", "energy", "ratio", "idempotence"]
            lines = [",".join(header)] + [",".join(f"{row[key]:.17g}" for key in header) for row in study["rows"]]
            (out_dir / "projection.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
            self._report(study, quiet)
            if len(study["rows"]) >= 2 and not check_order(study["ratio_slope"], PROJECTION_RATIO_SLOPE,
                                                           PROJECTION_RATIO_TOLERANCE):
                click.echo(f"誤差比の傾き {format_order(study['ratio_slope'])} が期待値を下回りました", err=True)
                return EXIT_ACCEPTANCE
            return EXIT_OK

        return self._execute(action, quiet)

    def info(self, config_path: Optional[str], overrides: Sequence[str], quiet: bool) -> int:
        """メッシュと自由度の概要を表示する"""

        def action() -> int:
            case = load_case(config_path, overrides)
            velocity_space, pressure_space = build_spaces(case)
            payload = dict(mesh_statistics(velocity_space.mesh))
            payload.update({"case": case.case, "k": case.k, "bc": case.bc,
                            "velocity_dofs": velocity_space.num_dofs, "pressure_dofs": pressure_space.num_dofs})
            self._report(payload, quiet)
            return EXIT_OK

        return self._execute(action, quiet)


def _json_default(value: Any) -> Any:
    if isinstance(value, float) and math.isnan(value):
        return None
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


_config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                              help="ケース設定ファイル (key = value)")
_set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                           help="設定の上書き（複数指定可）")
_out_option = click.option("--out", default=None, type=click.Path(file_okay=False), help="出力ディレクトリ")
_quiet_option = click.option("--quiet", is_flag=True, default=False, help="ターミナル出力を抑制")


def create_cli() -> click.Group:
    """コマンドグループを作成"""
    commands = Commands()

    @click.group()
    def cli():
        """H(div) 適合 Raviart–Thomas 要素による 2 次元非圧縮流れソルバー"""

    @cli.command()
    @_config_option
    @_set_option
    @_out_option
    @_quiet_option
    def run(config_path, overrides, out, quiet):
        """ケースを実行して時系列と要約を書き出す"""
        raise SystemExit(commands.run(config_path, overrides, out, quiet))

    @cli.command()
    @_config_option
    @_set_option
    @_out_option
    @_quiet_option
    def convergence(config_path, overrides, out, quiet):
        """メッシュ収束次数を調べる"""
        raise SystemExit(commands.convergence(config_path, overrides, out, quiet))

    @cli.command()
    @click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="チェックポイント (.npz)")
    @click.option("--grid", "grid_n", type=int, default=Config.SPECTRUM_GRID, show_default=True, help="サンプル格子数")
    @click.option("--kappa-min", type=float, default=10.0, show_default=True, help="傾きフィットの下限波数")
    @click.option("--kappa-max", type=float, default=40.0, show_default=True, help="傾きフィットの上限波数")
    @_out_option
    @_quiet_option
    def spectrum(checkpoint, grid_n, kappa_min, kappa_max, out, quiet):
        """チェックポイントからエネルギースペクトルを計算する"""
        raise SystemExit(commands.spectrum(checkpoint, grid_n, kappa_min, kappa_max, out, quiet))

    @cli.command()
    @_config_option
    @_set_option
    @_out_option
    @_quiet_option
    def project(config_path, overrides, out, quiet):
        """初期速度の Stokes 射影を評価する"""
        raise SystemExit(commands.project(config_path, overrides, out, quiet))

    @cli.command()
    @_config_option
    @_set_option
    @_quiet_option
    def info(config_path, overrides, quiet):
        """メッシュと自由度の概要を表示する"""
        raise SystemExit(commands.info(config_path, overrides, quiet))

    return cli
