import json
import logging
import os
from datetime import datetime
from typing import final

from pydantic import BaseModel, Field
from sqlalchemy import DateTime, Float, ForeignKey, Integer, String, Text, UniqueConstraint, create_engine, func, select
from sqlalchemy.dialects.sqlite import insert
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column, relationship, sessionmaker

from .models import RunSummary, TraceLine

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


class SqlRun(Base):
    """SQLAlchemy model for the runs table"""
    __tablename__: str = 'runs'

    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    run_key: Mapped[str] = mapped_column(String(64), nullable=False, unique=True, index=True)
    bundle_path: Mapped[str] = mapped_column(String(1000), nullable=False, index=True)
    epsilon: Mapped[float] = mapped_column(Float, nullable=False, index=True)
    accuracy_drop_tolerance: Mapped[float] = mapped_column(Float, nullable=False)
    d_target: Mapped[int] = mapped_column(Integer, nullable=False)
    sigma_rule: Mapped[str] = mapped_column(String(20), nullable=False)
    original_accuracy: Mapped[float] = mapped_column(Float, nullable=False)
    final_accuracy: Mapped[float] = mapped_column(Float, nullable=False)
    model_memory_fraction_saved: Mapped[float] = mapped_column(Float, nullable=False)
    aggregate_space_saving: Mapped[float] = mapped_column(Float, nullable=False)
    created_at: Mapped[datetime] = mapped_column(DateTime, nullable=False, index=True)
    updated_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.now, onupdate=datetime.now, nullable=False)

    # Relationship with layer records
    layers: Mapped[list["SqlLayerRecord"]] = relationship(
        "SqlLayerRecord", back_populates="run", cascade="all, delete-orphan", order_by="SqlLayerRecord.position"
    )

    def to_pydantic(self) -> RunSummary:
        """Convert SQLAlchemy model to Pydantic model"""
        return RunSummary(
            run_key=self.run_key,
            bundle_path=self.bundle_path,
            epsilon=self.epsilon,
            accuracy_drop_tolerance=self.accuracy_drop_tolerance,
            d_target=self.d_target,
            sigma_rule=self.sigma_rule,
            original_accuracy=self.original_accuracy,
            final_accuracy=self.final_accuracy,
            model_memory_fraction_saved=self.model_memory_fraction_saved,
            aggregate_space_saving=self.aggregate_space_saving,
            created_at=self.created_at,
            layers=[layer.to_pydantic() for layer in self.layers],
        )


class SqlLayerRecord(Base):
    """SQLAlchemy model for the layer_records table"""
    __tablename__: str = 'layer_records'

    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    position: Mapped[int] = mapped_column(Integer, nullable=False)
    layer: Mapped[str] = mapped_column(String(200), nullable=False, index=True)
    decision: Mapped[str] = mapped_column(String(20), nullable=False, index=True)
    pre_acc: Mapped[float] = mapped_column(Float, nullable=False)
    post_acc: Mapped[float] = mapped_column(Float, nullable=False)
    original_params: Mapped[int] = mapped_column(Integer, nullable=False)
    compressed_params: Mapped[int] = mapped_column(Integer, nullable=False)
    space_saving: Mapped[float] = mapped_column(Float, nullable=False)
    ranks: Mapped[str] = mapped_column(Text, nullable=False)
    rel_error: Mapped[float] = mapped_column(Float, nullable=False)

    # Foreign key to run
    run_id: Mapped[int] = mapped_column(ForeignKey('runs.id'), nullable=False, index=True)

    # Relationship with run
    run: Mapped["SqlRun"] = relationship("SqlRun", back_populates="layers")

    # Unique constraint on (run_id, position) to prevent duplicate layer rows
    __table_args__: tuple[UniqueConstraint, ...] = (
        UniqueConstraint('run_id', 'position', name='unique_run_position'),
    )

    def to_pydantic(self) -> TraceLine:
        """Convert SQLAlchemy model to Pydantic model"""
        return TraceLine(
            layer=self.layer,
            decision=self.decision,  # pyright: ignore[reportArgumentType]
            pre_acc=self.pre_acc,
            post_acc=self.post_acc,
            original_params=self.original_params,
            compressed_params=self.compressed_params,
            space_saving=self.space_saving,
            ranks=json.loads(self.ranks),
            rel_error=self.rel_error,
        )


@final
class RegistryManager:
    """compress-model 執行紀錄 (SQLite)，以 run_key 去重"""

    def __init__(self, db_path: str = "ptnn_runs.db"):
        self.db_path = db_path
        self.engine = create_engine(f"sqlite:///{db_path}", echo=False)
        self.sessions = sessionmaker(bind=self.engine, autoflush=False, expire_on_commit=False)
        Base.metadata.create_all(bind=self.engine)

    def _insert_layers(self, session: Session, run_id: int, layers: list[TraceLine]) -> int:
        inserted = 0
        for position, line in enumerate(layers):
            # 已存在的 (run_id, position) 保留原值
            stmt = (
                insert(SqlLayerRecord)
                .values(
                    position=position,
                    layer=line.layer,
                    decision=line.decision,
                    pre_acc=line.pre_acc,
                    post_acc=line.post_acc,
                    original_params=line.original_params,
                    compressed_params=line.compressed_params,
                    space_saving=line.space_saving,
                    ranks=json.dumps(line.ranks),
                    rel_error=line.rel_error,
                    run_id=run_id,
                )
                .on_conflict_do_nothing(index_elements=['run_id', 'position'])
            )
            inserted += getattr(session.execute(stmt), 'rowcount', 0)
        return inserted

    def save_run(self, summary: RunSummary) -> int:
        """
        儲存一次執行與其層紀錄；相同 run_key 只更新結果欄位

        Args:
            summary: 執行摘要

        Returns:
            runs 資料表的 id
        """
        with self.sessions.begin() as session:
            run_db = session.scalars(select(SqlRun).filter_by(run_key=summary.run_key)).first()
            if run_db is None:
                run_db = SqlRun(
                    run_key=summary.run_key,
                    epsilon=summary.epsilon,
                    accuracy_drop_tolerance=summary.accuracy_drop_tolerance,
                    d_target=summary.d_target,
                    sigma_rule=summary.sigma_rule,
                    created_at=summary.created_at,
                )
                session.add(run_db)
                action = "Recorded"
            else:
                action = "Updated"

            run_db.bundle_path = summary.bundle_path
            run_db.original_accuracy = summary.original_accuracy
            run_db.final_accuracy = summary.final_accuracy
            run_db.model_memory_fraction_saved = summary.model_memory_fraction_saved
            run_db.aggregate_space_saving = summary.aggregate_space_saving
            run_db.updated_at = datetime.now()
            session.flush()

            added = self._insert_layers(session, run_db.id, summary.layers)
            logger.info(f"🗃️ {action} run {summary.run_key[:12]} ({added} new layer records)")
            return run_db.id

    def get_run(self, run_key: str) -> RunSummary | None:
        with self.sessions() as session:
            run_db = session.scalars(select(SqlRun).filter_by(run_key=run_key)).first()
            return run_db.to_pydantic() if run_db else None

    def list_runs(self, limit: int | None = None, offset: int = 0) -> list[RunSummary]:
        """新的在前；limit 為 None 時全部列出"""
        stmt = select(SqlRun).order_by(SqlRun.created_at.desc(), SqlRun.id.desc())
        if limit:
            stmt = stmt.limit(limit).offset(offset)
        with self.sessions() as session:
            return [run.to_pydantic() for run in session.scalars(stmt)]

    def delete_run(self, run_key: str) -> bool:
        """刪除執行紀錄 (層紀錄一併刪除)，找不到時回傳 False"""
        with self.sessions.begin() as session:
            run_db = session.scalars(select(SqlRun).filter_by(run_key=run_key)).first()
            if run_db is None:
                return False
            session.delete(run_db)
            return True

    def get_registry_stats(self) -> "RegistryStats":
        with self.sessions() as session:
            total_runs, total_layer_records = session.execute(
                select(
                    select(func.count()).select_from(SqlRun).scalar_subquery(),
                    select(func.count()).select_from(SqlLayerRecord).scalar_subquery(),
                )
            ).one()
        size = os.path.getsize(self.db_path) if os.path.exists(self.db_path) else 0
        return RegistryStats(
            total_runs=total_runs,
            total_layer_records=total_layer_records,
            database_path=self.db_path,
            database_size_mb=round(size / (1024 * 1024), 2),
        )

    def close(self) -> None:
        self.engine.dispose()


class RegistryStats(BaseModel):
    total_runs: int = Field(description="執行紀錄數")
    total_layer_records: int = Field(description="層紀錄數")
    database_path: str = Field(description="資料庫檔案路徑")
    database_size_mb: float = Field(description="資料庫檔案大小 (MB)")
