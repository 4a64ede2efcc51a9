# unips_system/data/database.py
import logging

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from unips_system.config.settings import get_database_url
from unips_system.data.models import Base

logger = logging.getLogger(__name__)

DATABASE_URL = get_database_url()

engine = create_engine(DATABASE_URL)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def init_db(bind=None):
    """Create registry tables that do not exist yet."""
    Base.metadata.create_all(bind=bind or engine)
    logger.debug(f"Registry tables ready on {(bind or engine).url}")


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
