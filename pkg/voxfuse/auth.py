import os
import secrets
from typing import Optional

from fastapi import Depends, HTTPException, status
from fastapi.security import APIKeyHeader

# Grid edits require X-API-Key == ADMIN_API_KEY
api_key_header = APIKeyHeader(name="X-API-Key", auto_error=False)


async def require_editor(api_key: Optional[str] = Depends(api_key_header)) -> bool:
    """Allow the request only when it carries the configured admin key"""
    expected_key = os.getenv("ADMIN_API_KEY")

    if not expected_key:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="Grid editing is disabled: ADMIN_API_KEY is not configured"
        )

    if not api_key or not secrets.compare_digest(api_key, expected_key):
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Invalid or missing API key; editing the grid requires admin access"
        )

    return True
