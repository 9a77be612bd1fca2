"""
completion endpoint client, scoring protocol and a mock server

The mock server serves prefix table models over the same wire format as the hosted endpoints,
so the http transport can be tested end to end without network access.
"""

import logging
from http import HTTPStatus

from pydantic import ValidationError
from quart import Quart
from quart_schema import QuartSchema, RequestSchemaValidationError, ResponseSchemaValidationError

from ..errors import LabError
from ..model.mock import PrefixTableModel
from .api import completions
from .completion import ModelNotFound

logger = logging.getLogger(__name__)


def create_app(models: dict[str, PrefixTableModel], supports_echo: bool = True) -> Quart:
    """a mock completion server for the given models, by name"""
    app = Quart(__name__)
    QuartSchema(app)
    app.config['MODELS'] = models
    app.config['SUPPORTS_ECHO'] = supports_echo

    @app.errorhandler(RequestSchemaValidationError)
    async def handle_request_validation_error(error: RequestSchemaValidationError):
        val_err = error.validation_error
        return {
            "title": '400: ValidationError',
            "errors": val_err.errors(include_context=False) if isinstance(val_err, ValidationError) else [{"msg": str(val_err)}],
        }, HTTPStatus.BAD_REQUEST

    @app.errorhandler(ResponseSchemaValidationError)
    async def handle_response_validation_error(error: ResponseSchemaValidationError):
        val_err = error.validation_error
        return {
            "title": '500: ResponseError',
            "errors": val_err.errors(include_context=False) if isinstance(val_err, ValidationError) else [{"msg": str(val_err)}],
        }, HTTPStatus.INTERNAL_SERVER_ERROR

    @app.errorhandler(ValidationError)
    async def handle_pydantic_validation_error(error: ValidationError):
        return {
            "title": '500: Internal Validation Error',
            "errors": [{
                'type': e['type'],
                'loc': e['loc'],
                'msg': e['msg'],
            } for e in error.errors()],
        }, HTTPStatus.INTERNAL_SERVER_ERROR

    @app.errorhandler(ModelNotFound)
    async def handle_model_not_found(error: ModelNotFound):
        return {
            "title": "404: Model not found",
            "errors": [
                {
                    "msg": str(error)
                }
            ]
        }, HTTPStatus.NOT_FOUND

    @app.errorhandler(LabError)
    async def handle_lab_error(error: LabError):
        return {
            "title": "400: Bad request",
            "errors": [
                {
                    "category": error.category,
                    "msg": str(error),
                }
            ]
        }, HTTPStatus.BAD_REQUEST

    app.register_blueprint(completions.blue)
    logger.info('mock completion server for models %s (echo %s)', sorted(models), supports_echo)
    return app
